//! Frictional plant in shifted coordinates.
//!
//! The state is `(x1, x2, x3)`: accumulated slip, displacement and slip-rate
//! measured from the verge-of-slip operating point. Forces are in the units of
//! the stiffness matrix times displacement. Friction is set-valued Coulomb with
//! a slip-weakening coefficient and an explicit stick/slip branch per element.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Slip-weakening friction law `mu(d) = mu_res - delta_mu * exp(-d / d_c)`
/// together with the bounds used by the controller design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    pub mu_res: f64,
    /// Signed weakening amplitude, `mu_res - mu_max`. Negative for weakening.
    pub delta_mu: f64,
    /// Characteristic slip [m].
    pub d_c: f64,
    /// Known lower bound of the friction coefficient.
    pub mu_min: f64,
    /// Sector slope on slip [1/m].
    pub l_delta: f64,
    /// Sector slope on slip-rate [s/m].
    pub l_v: f64,
}

impl Default for FrictionParams {
    fn default() -> Self {
        let mu_res = 0.5;
        let delta_mu = -0.1;
        let d_c = 10.0;
        Self {
            mu_res,
            delta_mu,
            d_c,
            mu_min: mu_res / 2.0,
            l_delta: 4.0 * delta_mu.abs() / d_c,
            l_v: 0.0,
        }
    }
}

impl FrictionParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu_res, self.delta_mu, self.d_c, self.mu_min, self.l_delta, self.l_v]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidModel("friction parameters must be finite".into()));
        }
        if self.mu_min <= 0.0 {
            return Err(Error::InvalidModel(format!("mu_min must be > 0, got {}", self.mu_min)));
        }
        if self.d_c <= 0.0 {
            return Err(Error::InvalidModel(format!("d_c must be > 0, got {}", self.d_c)));
        }
        if self.l_delta < 0.0 || self.l_v < 0.0 {
            return Err(Error::InvalidModel("sector slopes must be nonnegative".into()));
        }
        // mu is monotone in slip, so its infimum is at one of the ends.
        let inf = self.mu_static().min(self.mu_res);
        if inf < self.mu_min {
            return Err(Error::InvalidModel(format!(
                "friction coefficient falls to {inf} which is below mu_min = {}",
                self.mu_min
            )));
        }
        Ok(())
    }

    /// Coefficient at zero slip, `mu_max`.
    pub fn mu_static(&self) -> f64 {
        self.mu_res - self.delta_mu
    }

    /// Evaluates the law without the domain check; negative slip is clamped to 0.
    #[inline]
    pub fn mu(&self, slip: f64) -> f64 {
        self.mu_res - self.delta_mu * (-slip.max(0.0) / self.d_c).exp()
    }

    /// `mu(from + dx) - mu(from)` without cancellation for small `dx`.
    #[inline]
    pub fn mu_change(&self, from: f64, dx: f64) -> f64 {
        let a = from.max(0.0);
        let b = (from + dx).max(0.0);
        -self.delta_mu * (-a / self.d_c).exp() * (-(b - a) / self.d_c).exp_m1()
    }

    /// `d mu / d slip`.
    #[inline]
    pub fn mu_slope(&self, slip: f64) -> f64 {
        self.delta_mu / self.d_c * (-slip.max(0.0) / self.d_c).exp()
    }

    /// Sector slope obtained from the weakening rate: `4 |delta_mu| / d_c`.
    pub fn sector_slope_rule(&self) -> f64 {
        4.0 * self.delta_mu.abs() / self.d_c
    }
}

/// Friction coefficient at a given slip [m].
pub fn mu_coefficient(slip: f64, params: &FrictionParams) -> Result<f64> {
    if slip < 0.0 || slip.is_nan() {
        return Err(Error::NegativeSlip(slip));
    }
    Ok(params.mu(slip))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    /// Direction of a nonzero value; `None` at exactly zero.
    pub fn of(v: f64) -> Option<Self> {
        if v > 0.0 {
            Some(Direction::Forward)
        } else if v < 0.0 {
            Some(Direction::Backward)
        } else {
            None
        }
    }
}

/// Per-element friction mode. A slipping element carries its direction so the
/// set-valued sign is never evaluated at zero slip-rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Stick,
    Slip(Direction),
}

impl Mode {
    #[inline]
    pub fn is_stuck(self) -> bool {
        matches!(self, Mode::Stick)
    }

    /// +1 / -1 while slipping, 0 while stuck.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Mode::Stick => 0.0,
            Mode::Slip(d) => d.sign(),
        }
    }
}

/// Raw matrices and vectors of a fault; validated by [`FaultModel::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct FaultModelParts {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub viscosity: DMatrix<f64>,
    pub sigma_n: DVector<f64>,
    pub c_p: DMatrix<f64>,
    pub friction: FrictionParams,
    pub delta0: DVector<f64>,
    pub f_s_star: DVector<f64>,
    pub p0: DVector<f64>,
}

impl FaultModelParts {
    /// Parts for a fault placed exactly on the verge of slip: `delta0 = 0`,
    /// `p0 = 0` and `F_s* = mu(0) sigma_n'`.
    pub fn at_verge_of_slip(
        mass: DMatrix<f64>,
        stiffness: DMatrix<f64>,
        viscosity: DMatrix<f64>,
        sigma_n: DVector<f64>,
        c_p: DMatrix<f64>,
        friction: FrictionParams,
    ) -> Self {
        let n = sigma_n.len();
        let q = c_p.ncols();
        let f_s_star = sigma_n.map(|s| friction.mu(0.0) * s);
        Self {
            mass,
            stiffness,
            viscosity,
            sigma_n,
            c_p,
            friction,
            delta0: DVector::zeros(n),
            f_s_star,
            p0: DVector::zeros(q),
        }
    }
}

/// Discretized fault with validated structural assumptions: symmetric positive
/// definite inertia, stiffness and viscosity, nonnegative initial slip and a
/// full-column-rank control influence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultModel {
    mass: DMatrix<f64>,
    stiffness: DMatrix<f64>,
    viscosity: DMatrix<f64>,
    sigma_n: DVector<f64>,
    c_p: DMatrix<f64>,
    friction: FrictionParams,
    delta0: DVector<f64>,
    f_s_star: DVector<f64>,
    p0: DVector<f64>,
    inv_mass_diag: Option<DVector<f64>>,
    /// `mu(delta0) sigma_n' - F_s*`, zero on the verge of slip.
    verge_residual: DVector<f64>,
}

fn check_spd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidModel(format!("{name} is not symmetric at ({i}, {j})")));
            }
        }
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidModel(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// Numerical column rank of a tall matrix from its singular values.
pub(crate) fn column_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = max * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

impl FaultModel {
    pub fn new(parts: FaultModelParts) -> Result<Self> {
        let FaultModelParts {
            mass,
            stiffness,
            viscosity,
            sigma_n,
            c_p,
            friction,
            delta0,
            f_s_star,
            p0,
        } = parts;
        let n = sigma_n.len();
        if n == 0 {
            return Err(Error::InvalidModel("fault must have at least one element".into()));
        }
        for (what, m) in [("mass", &mass), ("stiffness", &stiffness), ("viscosity", &viscosity)] {
            check_len(what, n, m.nrows())?;
            check_len(what, n, m.ncols())?;
        }
        check_len("c_p rows", n, c_p.nrows())?;
        check_len("delta0", n, delta0.len())?;
        check_len("f_s_star", n, f_s_star.len())?;
        let q = c_p.ncols();
        check_len("p0", q, p0.len())?;
        if q == 0 || q > n {
            return Err(Error::InvalidModel(format!(
                "input count must satisfy 1 <= q <= n, got q = {q}, n = {n}"
            )));
        }
        friction.validate()?;
        check_spd("mass matrix", &mass)?;
        check_spd("stiffness matrix", &stiffness)?;
        check_spd("viscosity matrix", &viscosity)?;
        if delta0.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::InvalidModel("initial slip delta0 must be componentwise >= 0".into()));
        }
        if sigma_n.iter().any(|s| !s.is_finite()) || f_s_star.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidModel("normal stress and preload must be finite".into()));
        }
        if column_rank(&c_p) < q {
            return Err(Error::Singular("control influence matrix C_p"));
        }
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || mass[(i, j)] == 0.0));
        let inv_mass_diag = is_diag.then(|| mass.diagonal().map(|m| 1.0 / m));
        let verge_residual = DVector::from_fn(n, |i, _| friction.mu(delta0[i]) * sigma_n[i] - f_s_star[i]);
        Ok(Self {
            mass,
            stiffness,
            viscosity,
            sigma_n,
            c_p,
            friction,
            delta0,
            f_s_star,
            p0,
            inv_mass_diag,
            verge_residual,
        })
    }

    pub fn n(&self) -> usize {
        self.sigma_n.len()
    }
    pub fn q(&self) -> usize {
        self.c_p.ncols()
    }
    /// More degrees of freedom than inputs.
    pub fn is_underactuated(&self) -> bool {
        self.q() < self.n()
    }
    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }
    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }
    pub fn viscosity(&self) -> &DMatrix<f64> {
        &self.viscosity
    }
    pub fn sigma_n(&self) -> &DVector<f64> {
        &self.sigma_n
    }
    pub fn c_p(&self) -> &DMatrix<f64> {
        &self.c_p
    }
    pub fn friction(&self) -> &FrictionParams {
        &self.friction
    }
    pub fn delta0(&self) -> &DVector<f64> {
        &self.delta0
    }
    pub fn f_s_star(&self) -> &DVector<f64> {
        &self.f_s_star
    }
    pub fn p0(&self) -> &DVector<f64> {
        &self.p0
    }

    pub fn to_parts(&self) -> FaultModelParts {
        FaultModelParts {
            mass: self.mass.clone(),
            stiffness: self.stiffness.clone(),
            viscosity: self.viscosity.clone(),
            sigma_n: self.sigma_n.clone(),
            c_p: self.c_p.clone(),
            friction: self.friction,
            delta0: self.delta0.clone(),
            f_s_star: self.f_s_star.clone(),
            p0: self.p0.clone(),
        }
    }

    #[inline]
    pub(crate) fn mu_at(&self, i: usize, x1: f64) -> f64 {
        self.friction.mu(x1 + self.delta0[i])
    }

    /// Static capacity `mu sigma_eff` and forward excess `mu sigma_eff - F_s*`.
    /// The excess is assembled from increments relative to the operating point
    /// so it stays accurate when the capacity is many orders larger.
    pub(crate) fn capacity_and_excess(&self, x1: &DVector<f64>, p: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_len("x1", self.n(), x1.len())?;
        check_len("p", self.q(), p.len())?;
        let cp = &self.c_p * p;
        let n = self.n();
        let mut cap = DVector::zeros(n);
        let mut excess = DVector::zeros(n);
        for i in 0..n {
            let raw = self.sigma_n[i] - cp[i];
            if raw >= 0.0 {
                let mu0 = self.friction.mu(self.delta0[i]);
                let dmu = self.friction.mu_change(self.delta0[i], x1[i]);
                cap[i] = (mu0 + dmu) * raw;
                excess[i] = dmu * raw - mu0 * cp[i] + self.verge_residual[i];
            } else {
                excess[i] = -self.f_s_star[i];
            }
        }
        Ok((cap, excess))
    }

    /// Solves `M a = f` for the slipping elements with stuck accelerations
    /// pinned to zero. Returns the accelerations.
    pub(crate) fn accelerations(&self, net: &DVector<f64>, modes: &[Mode]) -> DVector<f64> {
        let n = self.n();
        if let Some(inv) = &self.inv_mass_diag {
            return DVector::from_fn(n, |i, _| if modes[i].is_stuck() { 0.0 } else { net[i] * inv[i] });
        }
        let active: Vec<usize> = (0..n).filter(|&i| !modes[i].is_stuck()).collect();
        let mut out = DVector::zeros(n);
        if active.is_empty() {
            return out;
        }
        let m_aa = DMatrix::from_fn(active.len(), active.len(), |a, b| self.mass[(active[a], active[b])]);
        let rhs = DVector::from_fn(active.len(), |a, _| net[active[a]]);
        // SPD principal submatrix; cholesky cannot fail for a validated mass.
        let sol = m_aa.cholesky().expect("principal submatrix of SPD mass").solve(&rhs);
        for (a, &i) in active.iter().enumerate() {
            out[i] = sol[a];
        }
        out
    }
}

/// Trajectory state of the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
    pub x3: DVector<f64>,
    pub mode: Vec<Mode>,
}

impl PlantState {
    /// Shifted origin with every element on the verge of slip in the forward direction.
    pub fn origin(n: usize) -> Self {
        Self {
            x1: DVector::zeros(n),
            x2: DVector::zeros(n),
            x3: DVector::zeros(n),
            mode: vec![Mode::Slip(Direction::Forward); n],
        }
    }

    pub fn n(&self) -> usize {
        self.x1.len()
    }

    pub fn check(&self, model: &FaultModel) -> Result<()> {
        let n = model.n();
        check_len("x1", n, self.x1.len())?;
        check_len("x2", n, self.x2.len())?;
        check_len("x3", n, self.x3.len())?;
        check_len("mode", n, self.mode.len())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantDerivative {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
    pub x3: DVector<f64>,
}

/// Viscoelastic force `-K x2 - H x3`.
pub fn elastic_force(x2: &DVector<f64>, x3: &DVector<f64>, model: &FaultModel) -> Result<DVector<f64>> {
    check_len("x2", model.n(), x2.len())?;
    check_len("x3", model.n(), x3.len())?;
    Ok(-(&model.stiffness * x2) - &model.viscosity * x3)
}

/// Effective normal stress `sigma_n' - C_p p`, floored at zero (an opened
/// fault carries no friction).
pub fn effective_normal_stress(p: &DVector<f64>, model: &FaultModel) -> Result<DVector<f64>> {
    check_len("p", model.q(), p.len())?;
    let mut s = &model.sigma_n - &model.c_p * p;
    s.apply(|v| *v = v.max(0.0));
    Ok(s)
}

/// Static friction capacity `mu(x1 + delta0) (sigma_n' - C_p p)` per element.
pub fn static_capacity(x1: &DVector<f64>, p: &DVector<f64>, model: &FaultModel) -> Result<DVector<f64>> {
    model.capacity_and_excess(x1, p).map(|(cap, _)| cap)
}

/// Shifted friction on the slip branch, `g - b C_p p`.
pub fn shifted_friction_slip(
    x1: &DVector<f64>,
    x3: &DVector<f64>,
    p: &DVector<f64>,
    model: &FaultModel,
) -> Result<DVector<f64>> {
    check_len("x3", model.n(), x3.len())?;
    if let Some(i) = x3.iter().position(|&v| v == 0.0) {
        return Err(Error::BranchViolation(i));
    }
    let (cap, excess) = model.capacity_and_excess(x1, p)?;
    Ok(DVector::from_fn(model.n(), |i, _| slip_force(x3[i].signum(), cap[i], excess[i], model.f_s_star[i])))
}

/// Forces acting on each element for a given mode assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantForces {
    /// `-K x2 - H x3`.
    pub elastic: DVector<f64>,
    /// Total tangential load in unshifted terms, `elastic + F_s*`.
    pub load: DVector<f64>,
    /// Static friction capacity.
    pub capacity: DVector<f64>,
    /// Shifted friction force `F_r`.
    pub friction: DVector<f64>,
    /// `capacity - |load|`; positive while a resting element can stick.
    pub margin: DVector<f64>,
}

#[inline]
fn slip_force(sign: f64, capacity: f64, excess: f64, f_s: f64) -> f64 {
    if sign > 0.0 {
        excess
    } else {
        -capacity - f_s
    }
}

/// `capacity - |elastic + F_s*|`, computed from the forward excess when the
/// load points forward.
#[inline]
fn stick_margin(elastic: f64, capacity: f64, excess: f64, f_s: f64) -> f64 {
    let load = elastic + f_s;
    if load >= 0.0 {
        excess - elastic
    } else {
        capacity + load
    }
}

/// Evaluates elastic load, capacity and shifted friction under fixed modes.
/// Stuck elements carry whatever friction keeps their acceleration at zero.
pub fn plant_forces(
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    x3: &DVector<f64>,
    p: &DVector<f64>,
    modes: &[Mode],
    model: &FaultModel,
) -> Result<PlantForces> {
    plant_forces_with(x1, x2, x3, p, modes, model, None)
}

/// As [`plant_forces`], with an extra applied force added to the elastic term.
pub(crate) fn plant_forces_with(
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    x3: &DVector<f64>,
    p: &DVector<f64>,
    modes: &[Mode],
    model: &FaultModel,
    extra: Option<&DVector<f64>>,
) -> Result<PlantForces> {
    check_len("mode", model.n(), modes.len())?;
    let mut elastic = elastic_force(x2, x3, model)?;
    if let Some(e) = extra {
        elastic += e;
    }
    let (capacity, excess) = model.capacity_and_excess(x1, p)?;
    let load = &elastic + &model.f_s_star;
    let margin = DVector::from_fn(model.n(), |i, _| stick_margin(elastic[i], capacity[i], excess[i], model.f_s_star[i]));
    let mut friction = DVector::from_fn(model.n(), |i, _| match modes[i] {
        Mode::Slip(d) => slip_force(d.sign(), capacity[i], excess[i], model.f_s_star[i]),
        Mode::Stick => elastic[i],
    });
    if model.inv_mass_diag.is_none() && modes.iter().any(|m| m.is_stuck()) {
        // Non-diagonal inertia: the stick force also absorbs inertial coupling.
        let acc = model.accelerations(&(&elastic - &friction), modes);
        let coupling = &model.mass * &acc;
        for i in 0..model.n() {
            if modes[i].is_stuck() {
                friction[i] = elastic[i] - coupling[i];
            }
        }
    }
    Ok(PlantForces { elastic, load, capacity, friction, margin })
}

/// Three-branch set-valued friction evaluated from the state alone.
///
/// Slipping elements (`x3 != 0`) use the Coulomb slip branch. An element at
/// rest sticks while its load stays strictly inside the static capacity and
/// otherwise breaks away at the capacity in the direction of the load.
pub fn friction_branch(
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    x3: &DVector<f64>,
    p: &DVector<f64>,
    model: &FaultModel,
) -> Result<(DVector<f64>, Vec<Mode>)> {
    let elastic = elastic_force(x2, x3, model)?;
    let (capacity, excess) = model.capacity_and_excess(x1, p)?;
    let n = model.n();
    let mut force = DVector::zeros(n);
    let mut modes = Vec::with_capacity(n);
    for i in 0..n {
        let fs = model.f_s_star[i];
        let mode = match Direction::of(x3[i]) {
            Some(d) => {
                force[i] = slip_force(d.sign(), capacity[i], excess[i], fs);
                Mode::Slip(d)
            }
            None => {
                let load = elastic[i] + fs;
                let mode = classify_rest(load, stick_margin(elastic[i], capacity[i], excess[i], fs));
                force[i] = match mode {
                    Mode::Stick => elastic[i],
                    Mode::Slip(d) => slip_force(d.sign(), capacity[i], excess[i], fs),
                };
                mode
            }
        };
        modes.push(mode);
    }
    Ok((force, modes))
}

/// Shifted dynamics `x1' = |x3|, x2' = x3, M x3' = -K x2 - H x3 - F_r` under
/// the modes stored in `state`. Stuck elements report zero acceleration.
pub fn plant_rhs(state: &PlantState, p: &DVector<f64>, _t: f64, model: &FaultModel) -> Result<PlantDerivative> {
    state.check(model)?;
    let forces = plant_forces(&state.x1, &state.x2, &state.x3, p, &state.mode, model)?;
    let acc = model.accelerations(&(&forces.elastic - &forces.friction), &state.mode);
    Ok(PlantDerivative {
        x1: state.x3.abs(),
        x2: state.x3.clone(),
        x3: acc,
    })
}

/// Mode that element `element` takes after an event: an element at rest sticks
/// if its load is strictly inside the capacity, otherwise it slips in the
/// direction of the load.
pub fn mode_transition(state: &PlantState, element: usize, model: &FaultModel, p: &DVector<f64>) -> Result<Mode> {
    state.check(model)?;
    if element >= model.n() {
        return Err(Error::Shape { what: "element index", expected: model.n(), got: element });
    }
    let mut x3 = state.x3.clone();
    x3[element] = 0.0;
    let elastic = elastic_force(&state.x2, &x3, model)?;
    let (cap, excess) = model.capacity_and_excess(&state.x1, p)?;
    let fs = model.f_s_star[element];
    let load = elastic[element] + fs;
    Ok(classify_rest(load, stick_margin(elastic[element], cap[element], excess[element], fs)))
}

#[inline]
/// `margin` is `capacity - |load|`.
pub(crate) fn classify_rest(load: f64, margin: f64) -> Mode {
    if margin > 0.0 {
        Mode::Stick
    } else if load >= 0.0 {
        Mode::Slip(Direction::Forward)
    } else {
        Mode::Slip(Direction::Backward)
    }
}
