//! High-gain observer driven by the average slip-rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{plant_forces_with, Direction, FaultModel, Mode};

/// User-facing observer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverSettings {
    pub epsilon: f64,
    /// Scalar shape of `L1 = l1 * n * C_m^T`.
    pub l1: f64,
    /// Scalar shape of `L2 = l2 * n * C_m^T`.
    pub l2: f64,
    /// Relative error applied to the nominal stiffness, viscosity and weakening amplitude.
    pub mismatch: f64,
}

impl Default for ObserverSettings {
    fn default() -> Self {
        Self { epsilon: 0.1, l1: 0.0, l2: 2.0, mismatch: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverConfig {
    pub epsilon: f64,
    pub l1: DVector<f64>,
    pub l2: DVector<f64>,
    pub c_m: DMatrix<f64>,
    /// Nominal plant (`M0`, `K0`, `H0` and friction).
    pub nominal: FaultModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HurwitzReport {
    /// Eigenvalues as `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub max_real: f64,
    /// Largest real part of the error matrix with `L1, L2` scaled by `1/eps`, `1/eps^2`.
    pub scaled_max_real: f64,
    pub passed: bool,
}

/// Nominal copy of a plant with stiffness, viscosity and weakening amplitude
/// scaled by `1 + mismatch`; the static coefficient and preload are kept.
pub fn perturbed_nominal(plant: &FaultModel, mismatch: f64) -> Result<FaultModel> {
    let mut parts = plant.to_parts();
    let s = 1.0 + mismatch;
    parts.stiffness *= s;
    parts.viscosity *= s;
    let mu0 = parts.friction.mu_static();
    parts.friction.delta_mu *= s;
    parts.friction.mu_res = mu0 + parts.friction.delta_mu;
    FaultModel::new(parts)
}

impl ObserverConfig {
    pub fn new(plant: &FaultModel, c_m: &DMatrix<f64>, settings: &ObserverSettings) -> Result<Self> {
        let n = plant.n();
        check_len("C_m columns", n, c_m.ncols())?;
        if c_m.nrows() != 1 {
            return Err(Error::Config("observer measurement must be scalar (C_m is 1 x n)".into()));
        }
        if !(settings.epsilon > 0.0 && settings.epsilon.is_finite()) {
            return Err(Error::Config(format!("observer.epsilon must be > 0, got {}", settings.epsilon)));
        }
        if !(settings.mismatch > -1.0) {
            return Err(Error::Config("observer.mismatch must be > -1".into()));
        }
        let shape = c_m.transpose().column(0) * n as f64;
        let nominal = perturbed_nominal(plant, settings.mismatch)?;
        Ok(Self {
            epsilon: settings.epsilon,
            l1: &shape * settings.l1,
            l2: &shape * settings.l2,
            c_m: c_m.clone(),
            nominal,
        })
    }

    pub fn lambda1(&self) -> f64 {
        1.0 / self.epsilon
    }

    pub fn lambda2(&self) -> f64 {
        1.0 / (self.epsilon * self.epsilon)
    }

    pub fn n(&self) -> usize {
        self.nominal.n()
    }

    pub fn innovation(&self, y_m: f64, x3_hat: &DVector<f64>) -> f64 {
        y_m - (&self.c_m * x3_hat)[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub x1_hat: DVector<f64>,
    pub x2_hat: DVector<f64>,
    pub x3_hat: DVector<f64>,
    pub mode: Vec<Mode>,
}

impl ObserverState {
    pub fn zeros(n: usize) -> Self {
        Self {
            x1_hat: DVector::zeros(n),
            x2_hat: DVector::zeros(n),
            x3_hat: DVector::zeros(n),
            mode: vec![Mode::Slip(Direction::Forward); n],
        }
    }

    pub fn clamp_slip(&mut self) {
        self.x1_hat.apply(|v| *v = v.max(0.0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverDerivative {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
    pub x3: DVector<f64>,
}

/// Output injection on the acceleration, expressed as a force `M0 lambda2 L2 e`.
pub(crate) fn injection_force(config: &ObserverConfig, innovation: f64) -> DVector<f64> {
    config.nominal.mass() * (&config.l2 * (config.lambda2() * innovation))
}

/// Observer dynamics. Elements in `Stick` keep a zero slip-rate estimate; the
/// innovation enters their load through the injection force.
pub fn observer_rhs(
    est: &ObserverState,
    y_m: f64,
    p_hat: &DVector<f64>,
    _t: f64,
    config: &ObserverConfig,
) -> Result<ObserverDerivative> {
    let n = config.n();
    check_len("x1_hat", n, est.x1_hat.len())?;
    check_len("x2_hat", n, est.x2_hat.len())?;
    check_len("x3_hat", n, est.x3_hat.len())?;
    let e = config.innovation(y_m, &est.x3_hat);
    let inj = injection_force(config, e);
    let x1 = est.x1_hat.map(|v| v.max(0.0));
    let f = plant_forces_with(&x1, &est.x2_hat, &est.x3_hat, p_hat, &est.mode, &config.nominal, Some(&inj))?;
    let acc = config.nominal.accelerations(&(&f.elastic - &f.friction), &est.mode);
    Ok(ObserverDerivative {
        x1: est.x3_hat.abs(),
        x2: &est.x3_hat + &config.l1 * (config.lambda1() * e),
        x3: acc,
    })
}

fn error_matrix(config: &ObserverConfig, g1: f64, g2: f64) -> DMatrix<f64> {
    let n = config.n();
    let m0 = config.nominal.mass();
    let chol = m0.clone().cholesky().expect("validated mass");
    let k = chol.solve(config.nominal.stiffness());
    let h = chol.solve(config.nominal.viscosity());
    let l1c = &config.l1 * &config.c_m * g1;
    let l2c = &config.l2 * &config.c_m * g2;
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).copy_from(&(DMatrix::identity(n, n) - l1c));
    a.view_mut((n, 0), (n, n)).copy_from(&(-k));
    a.view_mut((n, n), (n, n)).copy_from(&(-h - l2c));
    a
}

/// The matrix `[[0, I - L1 C_m], [-K0, -H0 - L2 C_m]]` (stiffness and
/// viscosity mass-normalized).
pub fn hurwitz_matrix(config: &ObserverConfig) -> DMatrix<f64> {
    error_matrix(config, 1.0, 1.0)
}

/// Spectrum of the observer error matrix; passes when every eigenvalue has a
/// negative real part, both for the unit shapes and for the `eps`-scaled gains.
pub fn hurwitz_check(config: &ObserverConfig) -> HurwitzReport {
    let spectrum = |a: DMatrix<f64>| -> Vec<(f64, f64)> {
        a.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect()
    };
    let eigenvalues = spectrum(hurwitz_matrix(config));
    let max_real = eigenvalues.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    let scaled = spectrum(error_matrix(config, config.lambda1(), config.lambda2()));
    let scaled_max_real = scaled.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    // Roundoff leaves exact zero eigenvalues at about 1e-15 of the matrix scale.
    let tol = 1e-12 * hurwitz_matrix(config).amax().max(1.0);
    HurwitzReport {
        eigenvalues,
        max_real,
        scaled_max_real,
        passed: max_real < -tol && scaled_max_real < -tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FaultModelParts, FrictionParams};
    use approx::assert_relative_eq;

    fn one_dof(k: f64, h: f64) -> FaultModel {
        FaultModel::new(FaultModelParts::at_verge_of_slip(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, k),
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            FrictionParams::default(),
        ))
        .unwrap()
    }

    fn cfg(plant: &FaultModel, l1: f64, l2: f64, eps: f64) -> ObserverConfig {
        let c_m = DMatrix::from_element(1, plant.n(), 1.0 / plant.n() as f64);
        let s = ObserverSettings { epsilon: eps, l1, l2, mismatch: 0.0 };
        ObserverConfig::new(plant, &c_m, &s).unwrap()
    }

    #[test]
    fn hurwitz_example_double_root() {
        let c = cfg(&one_dof(1.0, 1.0), 0.0, 1.0, 1.0);
        let a = hurwitz_matrix(&c);
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]));
        let r = hurwitz_check(&c);
        for (re, im) in &r.eigenvalues {
            assert_relative_eq!(*re, -1.0, epsilon = 1e-6);
            assert!(im.abs() < 1e-6);
        }
        assert!(r.passed);
    }

    #[test]
    fn strongly_negative_injection_destabilizes() {
        let c = cfg(&one_dof(1.0, 1.0), 0.0, -50.0, 1.0);
        assert!(!hurwitz_check(&c).passed);
    }

    #[test]
    fn no_injection_keeps_open_loop_spectrum() {
        // s^2 + h s + k with k = 2, h = 0.5.
        let c = cfg(&one_dof(2.0, 0.5), 0.0, 0.0, 1.0);
        let r = hurwitz_check(&c);
        for (re, im) in &r.eigenvalues {
            assert_relative_eq!(*re, -0.25, epsilon = 1e-9);
            assert_relative_eq!(im.abs(), (2.0f64 - 0.0625).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn unit_shape_on_displacement_leaves_mean_mode_undamped() {
        // With L1 = n C_m^T the displacement block I - L1 C_m is a projector
        // and the mean mode has a zero eigenvalue.
        let parts = FaultModelParts::at_verge_of_slip(
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3) * 2.0,
            DMatrix::identity(3, 3),
            DVector::from_element(3, 1.0),
            DMatrix::from_element(3, 1, 1.0),
            FrictionParams::default(),
        );
        let plant = FaultModel::new(parts).unwrap();
        assert!(!hurwitz_check(&cfg(&plant, 1.0, 2.0, 0.1)).passed);
        assert!(hurwitz_check(&cfg(&plant, 0.0, 2.0, 0.1)).passed);
    }

    #[test]
    fn zero_innovation_reproduces_plant() {
        let plant = one_dof(2.0, 0.5);
        let c = cfg(&plant, 0.0, 2.0, 0.1);
        let est = ObserverState {
            x1_hat: DVector::from_element(1, 0.1),
            x2_hat: DVector::from_element(1, 0.05),
            x3_hat: DVector::from_element(1, 0.2),
            mode: vec![Mode::Slip(Direction::Forward)],
        };
        let p = DVector::from_element(1, 0.1);
        let d = observer_rhs(&est, 0.2, &p, 0.0, &c).unwrap();
        let ps = crate::model::PlantState {
            x1: est.x1_hat.clone(),
            x2: est.x2_hat.clone(),
            x3: est.x3_hat.clone(),
            mode: est.mode.clone(),
        };
        let dp = crate::model::plant_rhs(&ps, &p, 0.0, &plant).unwrap();
        assert_eq!(d.x1, dp.x1);
        assert_eq!(d.x2, dp.x2);
        assert_relative_eq!(d.x3, dp.x3, epsilon = 1e-15);
    }

    #[test]
    fn corrections_scale_with_epsilon() {
        let plant = one_dof(2.0, 0.5);
        let est = ObserverState {
            x1_hat: DVector::from_element(1, 0.1),
            x2_hat: DVector::zeros(1),
            x3_hat: DVector::from_element(1, 0.2),
            mode: vec![Mode::Slip(Direction::Forward)],
        };
        let p = DVector::zeros(1);
        let corr = |eps: f64| {
            let c = cfg(&plant, 1.0, 2.0, eps);
            let with = observer_rhs(&est, 0.5, &p, 0.0, &c).unwrap();
            let without = observer_rhs(&est, 0.2, &p, 0.0, &c).unwrap();
            (with.x2[0] - without.x2[0], with.x3[0] - without.x3[0])
        };
        let (a2, a3) = corr(0.1);
        let (b2, b3) = corr(0.05);
        assert_relative_eq!(b2, 2.0 * a2, max_relative = 1e-12);
        assert_relative_eq!(b3, 4.0 * a3, max_relative = 1e-12);
    }

    #[test]
    fn mismatch_preserves_static_coefficient() {
        let plant = one_dof(2.0, 0.5);
        let nom = perturbed_nominal(&plant, 0.05).unwrap();
        assert_relative_eq!(nom.friction().mu_static(), plant.friction().mu_static(), epsilon = 1e-15);
        assert_relative_eq!(nom.friction().delta_mu, -0.105, epsilon = 1e-15);
        assert_relative_eq!(nom.stiffness()[(0, 0)], 2.1, epsilon = 1e-15);
    }
}
