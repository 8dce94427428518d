//! Grid discretization of a planar fault with injection wells.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{column_rank, FaultModel, FaultModelParts, FrictionParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub nx: usize,
    pub nz: usize,
    /// Along-strike extent [m].
    pub lx: f64,
    /// Down-dip extent [m].
    pub lz: f64,
    pub sigma_surface: f64,
    /// Increase of effective normal stress per meter of depth.
    pub sigma_gradient: f64,
    pub element_mass: f64,
    pub spring_k: f64,
    /// Diagonal shift added to the grid Laplacian before scaling by `spring_k`.
    pub stiffness_regularization: f64,
    pub rayleigh_alpha: f64,
    pub rayleigh_beta: f64,
    /// Well locations `[x, z]` in fault-plane coordinates [m].
    pub well_positions: Vec<[f64; 2]>,
    pub well_kernel_radius: f64,
    pub c_h_scalar: f64,
    pub friction: FrictionParams,
    /// Optional sidecar CSV files replacing the assembled matrices.
    pub mass_csv: Option<PathBuf>,
    pub stiffness_csv: Option<PathBuf>,
    pub viscosity_csv: Option<PathBuf>,
    pub c_p_csv: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            nx: 10,
            nz: 10,
            lx: 3000.0,
            lz: 3000.0,
            sigma_surface: 3.95,
            sigma_gradient: 0.05 / 3000.0,
            element_mass: 5e-4,
            spring_k: 1e-4,
            stiffness_regularization: 391.5,
            rayleigh_alpha: 0.5,
            rayleigh_beta: 0.0,
            well_positions: vec![[750.0, 750.0], [2250.0, 750.0], [750.0, 2250.0], [2250.0, 2250.0]],
            well_kernel_radius: 750.0,
            c_h_scalar: 2.88e-7,
            friction: FrictionParams::default(),
            mass_csv: None,
            stiffness_csv: None,
            viscosity_csv: None,
            c_p_csv: None,
        }
    }
}

impl ScenarioConfig {
    /// Default physics on a smaller grid; wells are placed at the centers of
    /// the grid quadrants (or the single center when `wells == 1`).
    pub fn small(nx: usize, nz: usize, wells: usize) -> Self {
        let base = Self::default();
        let lx = base.lx * nx as f64 / base.nx as f64;
        let lz = base.lz * nz as f64 / base.nz as f64;
        let well_positions = match wells {
            1 => vec![[lx / 2.0, lz / 2.0]],
            2 => vec![[lx / 4.0, lz / 2.0], [3.0 * lx / 4.0, lz / 2.0]],
            _ => vec![
                [lx / 4.0, lz / 4.0],
                [3.0 * lx / 4.0, lz / 4.0],
                [lx / 4.0, 3.0 * lz / 4.0],
                [3.0 * lx / 4.0, 3.0 * lz / 4.0],
            ],
        };
        Self {
            nx,
            nz,
            lx,
            lz,
            well_positions,
            well_kernel_radius: base.well_kernel_radius * (nx.max(nz) as f64 / base.nx as f64).max(0.1),
            ..base
        }
    }

    pub fn n(&self) -> usize {
        self.nx * self.nz
    }

    pub fn q(&self) -> usize {
        self.well_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 {
            return Err(Error::Config("scenario.nx and scenario.nz must be >= 1".into()));
        }
        let positive = [
            ("scenario.lx", self.lx),
            ("scenario.lz", self.lz),
            ("scenario.sigma_surface", self.sigma_surface),
            ("scenario.element_mass", self.element_mass),
            ("scenario.spring_k", self.spring_k),
            ("scenario.well_kernel_radius", self.well_kernel_radius),
            ("scenario.c_h_scalar", self.c_h_scalar),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number, got {v}")));
            }
        }
        let nonneg = [
            ("scenario.sigma_gradient", self.sigma_gradient),
            ("scenario.stiffness_regularization", self.stiffness_regularization),
            ("scenario.rayleigh_alpha", self.rayleigh_alpha),
            ("scenario.rayleigh_beta", self.rayleigh_beta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.rayleigh_alpha == 0.0 && self.rayleigh_beta == 0.0 {
            return Err(Error::Config("scenario.rayleigh_alpha and rayleigh_beta cannot both be 0".into()));
        }
        if self.well_positions.is_empty() {
            return Err(Error::Config("scenario.well_positions must list at least one well".into()));
        }
        for (j, w) in self.well_positions.iter().enumerate() {
            if !(0.0..=self.lx).contains(&w[0]) || !(0.0..=self.lz).contains(&w[1]) {
                return Err(Error::Config(format!(
                    "well {j} at ({}, {}) lies outside the fault [0, {}] x [0, {}]",
                    w[0], w[1], self.lx, self.lz
                )));
            }
        }
        self.friction.validate().map_err(|e| Error::Config(format!("scenario.friction: {e}")))
    }

    /// Center of element `i` in fault-plane coordinates; `i = iz * nx + ix`.
    pub fn element_center(&self, i: usize) -> [f64; 2] {
        let ix = i % self.nx;
        let iz = i / self.nx;
        [
            (ix as f64 + 0.5) * self.lx / self.nx as f64,
            (iz as f64 + 0.5) * self.lz / self.nz as f64,
        ]
    }

    /// Effective normal stress at depth `z` [m].
    pub fn normal_stress_at(&self, z: f64) -> f64 {
        self.sigma_surface + self.sigma_gradient * z
    }
}

/// Fault model plus the actuator and measurement matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub fault: FaultModel,
    pub c_h: DMatrix<f64>,
    pub c_m: DMatrix<f64>,
}

/// Five-point Laplacian with free (Neumann) edges.
fn grid_laplacian(nx: usize, nz: usize) -> DMatrix<f64> {
    let n = nx * nz;
    let mut k = DMatrix::zeros(n, n);
    for iz in 0..nz {
        for ix in 0..nx {
            let i = iz * nx + ix;
            let mut nb = |j: usize| {
                k[(i, j)] -= 1.0;
                k[(i, i)] += 1.0;
            };
            if ix > 0 {
                nb(i - 1);
            }
            if ix + 1 < nx {
                nb(i + 1);
            }
            if iz > 0 {
                nb(i - nx);
            }
            if iz + 1 < nz {
                nb(i + nx);
            }
        }
    }
    k
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

/// Reads a dense matrix from a header-less comma separated file.
pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let io = |message: String| Error::Io { path: path.display().to_string(), message };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| io(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io(e.to_string()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| s.parse::<f64>().map_err(|e| io(format!("row {}, column {}: {e}", r + 1, c + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(io(format!("row {} has {} columns, expected {}", r + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(io("matrix file is empty".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Gaussian well kernel with columns scaled to unit maximum, diagonal
/// diffusivity and the averaging measurement row.
pub fn build_well_matrix(config: &ScenarioConfig) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    config.validate()?;
    let n = config.n();
    let q = config.q();
    let two_r2 = 2.0 * config.well_kernel_radius * config.well_kernel_radius;
    let mut c_p = DMatrix::from_fn(n, q, |i, j| {
        let c = config.element_center(i);
        let w = config.well_positions[j];
        let d2 = (c[0] - w[0]).powi(2) + (c[1] - w[1]).powi(2);
        (-d2 / two_r2).exp()
    });
    for mut col in c_p.column_iter_mut() {
        let m = col.max();
        if m > 0.0 {
            col /= m;
        }
    }
    if q > n || column_rank(&c_p) < q {
        return Err(Error::Singular("well influence matrix C_p (coincident or indistinguishable wells)"));
    }
    let c_h = DMatrix::identity(q, q) * config.c_h_scalar;
    let c_m = DMatrix::from_element(1, n, 1.0 / n as f64);
    Ok((c_p, c_h, c_m))
}

/// Assembles the fault at the verge of slip. Relative CSV paths are resolved
/// against `base_dir`.
pub fn build_scenario(config: &ScenarioConfig, base_dir: Option<&Path>) -> Result<Scenario> {
    let (mut c_p, c_h, c_m) = build_well_matrix(config)?;
    let n = config.n();
    let mass = match &config.mass_csv {
        Some(p) => load_matrix_csv(&resolve(base_dir, p))?,
        None => DMatrix::identity(n, n) * config.element_mass,
    };
    let stiffness = match &config.stiffness_csv {
        Some(p) => load_matrix_csv(&resolve(base_dir, p))?,
        None => {
            (grid_laplacian(config.nx, config.nz) + DMatrix::identity(n, n) * config.stiffness_regularization)
                * config.spring_k
        }
    };
    let viscosity = match &config.viscosity_csv {
        Some(p) => load_matrix_csv(&resolve(base_dir, p))?,
        None => &mass * config.rayleigh_alpha + &stiffness * config.rayleigh_beta,
    };
    if let Some(p) = &config.c_p_csv {
        c_p = load_matrix_csv(&resolve(base_dir, p))?;
    }
    let sigma_n = DVector::from_fn(n, |i, _| config.normal_stress_at(config.element_center(i)[1]));
    let parts = FaultModelParts::at_verge_of_slip(mass, stiffness, viscosity, sigma_n, c_p, config.friction);
    let fault = FaultModel::new(parts)?;
    Ok(Scenario { fault, c_h, c_m })
}

/// Fault model only; see [`build_scenario`].
pub fn build_fault(config: &ScenarioConfig) -> Result<FaultModel> {
    build_scenario(config, None).map(|s| s.fault)
}

/// Per-element stiffness margin `k_ii - |delta_mu| sigma_i / d_c`. Negative
/// entries can be destabilized by slip weakening.
pub fn critical_stiffness_report(model: &FaultModel) -> Vec<f64> {
    let f = model.friction();
    let rate = f.delta_mu.abs() / f.d_c;
    (0..model.n())
        .map(|i| model.stiffness()[(i, i)] - rate * model.sigma_n()[i])
        .collect()
}
