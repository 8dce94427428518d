//! Pressure laws: stabilization, integral tracking and compensation of the
//! injection (diffusion) dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::column_rank;

/// How the directional sign of a stuck element (`x3 = 0`) is resolved in the
/// integral and feed-forward terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StuckSign {
    /// `sign(0) = 0`: stuck elements carry no directional term.
    Zero,
    /// A stuck element takes the sign of its reference velocity.
    #[default]
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    pub lambda_delta: f64,
    pub lambda_v: f64,
    pub lambda_xi: f64,
    pub mu_min: f64,
    pub l_delta: f64,
    pub l_v: f64,
    #[serde(default)]
    pub stuck_sign: StuckSign,
    /// Output matrix of the integral action; filled from `C_p` when absent.
    #[serde(skip)]
    pub c_t: Option<DMatrix<f64>>,
}

impl Default for GainSet {
    fn default() -> Self {
        Self {
            lambda_delta: 40.0,
            lambda_v: 346.4,
            lambda_xi: 5e3,
            mu_min: 0.25,
            l_delta: 0.04,
            l_v: 0.0,
            stuck_sign: StuckSign::default(),
            c_t: None,
        }
    }
}

impl GainSet {
    /// Attaches `C_t = pinv(C_p)`.
    pub fn with_output_matrix(mut self, c_p: &DMatrix<f64>) -> Result<Self> {
        self.c_t = Some(left_pseudoinverse(c_p)?);
        Ok(self)
    }

    pub fn output_matrix(&self) -> Result<&DMatrix<f64>> {
        self.c_t
            .as_ref()
            .ok_or_else(|| Error::Config("gain set has no output matrix C_t".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainReport {
    /// `(l_delta + 1) / mu_min`.
    pub delta_threshold: f64,
    /// `l_v / mu_min`.
    pub v_threshold: f64,
    pub delta_ok: bool,
    pub v_ok: bool,
    pub xi_ok: bool,
    pub passed: bool,
}

/// Checks the strict gain inequalities of the stabilizing law.
pub fn validate_gains(gains: &GainSet) -> GainReport {
    let delta_threshold = (gains.l_delta + 1.0) / gains.mu_min;
    let v_threshold = gains.l_v / gains.mu_min;
    let delta_ok = gains.lambda_delta > delta_threshold;
    let v_ok = gains.lambda_v > v_threshold;
    let xi_ok = gains.lambda_xi >= 0.0 && gains.lambda_xi.is_finite();
    GainReport {
        delta_threshold,
        v_threshold,
        delta_ok,
        v_ok,
        xi_ok,
        passed: gains.mu_min > 0.0 && delta_ok && v_ok && xi_ok,
    }
}

/// `(C_p^T C_p)^-1 C_p^T` computed through a thin QR factorization.
pub fn left_pseudoinverse(c_p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = c_p.ncols();
    if q == 0 || q > c_p.nrows() || column_rank(c_p) < q {
        return Err(Error::Singular("control influence matrix C_p"));
    }
    let qr = c_p.clone().qr();
    let r = qr.r();
    let qt = qr.q().transpose();
    r.solve_upper_triangular(&qt)
        .ok_or(Error::Singular("control influence matrix C_p"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceParams {
    /// Target displacement [m].
    pub d_max: f64,
    /// Operational time [s].
    pub t_op: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self { d_max: 0.5, t_op: 360.0 * 86_400.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub r: f64,
    pub r_dot: f64,
    pub r_ddot: f64,
}

impl ReferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0 && self.d_max.is_finite()) || !(self.t_op > 0.0 && self.t_op.is_finite()) {
            return Err(Error::Config(format!(
                "reference.d_max and reference.t_op must be > 0, got {} and {}",
                self.d_max, self.t_op
            )));
        }
        Ok(())
    }

    /// Quintic smooth step `d_max s^3 (10 - 15 s + 6 s^2)` and its derivatives.
    pub fn eval(&self, t: f64) -> ReferenceSample {
        if t >= self.t_op {
            return ReferenceSample { r: self.d_max, r_dot: 0.0, r_ddot: 0.0 };
        }
        if t <= 0.0 {
            return ReferenceSample { r: 0.0, r_dot: 0.0, r_ddot: 0.0 };
        }
        let s = t / self.t_op;
        let d = self.d_max;
        let u = 1.0 - s;
        ReferenceSample {
            r: d * s * s * s * (10.0 - 15.0 * s + 6.0 * s * s),
            r_dot: 30.0 * d / self.t_op * s * s * u * u,
            r_ddot: 60.0 * d / (self.t_op * self.t_op) * s * u * (1.0 - 2.0 * s),
        }
    }

    /// Largest reference velocity, reached at `s = 1/2`.
    pub fn peak_rate(&self) -> f64 {
        1.875 * self.d_max / self.t_op
    }
}

/// Reference position and velocity at time `t`.
pub fn reference(t: f64, params: &ReferenceParams) -> (f64, f64) {
    let s = params.eval(t);
    (s.r, s.r_dot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub xi: DVector<f64>,
}

impl ControllerState {
    pub fn new(q: usize) -> Self {
        Self { xi: DVector::zeros(q) }
    }
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Diagonal of `sign(x3)` with the stuck-element rule applied.
pub fn direction_signs(x3: &DVector<f64>, r3: &DVector<f64>, rule: StuckSign) -> DVector<f64> {
    DVector::from_fn(x3.len(), |i, _| match (sgn(x3[i]), rule) {
        (s, _) if s != 0.0 => s,
        (_, StuckSign::Zero) => 0.0,
        (_, StuckSign::Reference) => sgn(r3[i]),
    })
}

/// `p = -lambda_delta C_p^T x1 - lambda_v C_p^T |x3|`.
pub fn stabilizing_pressure(
    x1: &DVector<f64>,
    x3: &DVector<f64>,
    gains: &GainSet,
    c_p: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_len("x1", c_p.nrows(), x1.len())?;
    check_len("x3", c_p.nrows(), x3.len())?;
    Ok(c_p.tr_mul(&(x1 * -gains.lambda_delta - x3.abs() * gains.lambda_v)))
}

/// Stabilizing law plus reference feed-forward and the integral term
/// `lambda_xi C_p^T sign(x3) C_p xi`.
pub fn tracking_pressure(
    x1: &DVector<f64>,
    x3: &DVector<f64>,
    xi: &DVector<f64>,
    r3: &DVector<f64>,
    gains: &GainSet,
    c_p: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_len("r3", c_p.nrows(), r3.len())?;
    check_len("x3", c_p.nrows(), x3.len())?;
    let s = direction_signs(x3, r3, gains.stuck_sign);
    tracking_pressure_signed(x1, x3, xi, r3, &s, gains, c_p)
}

/// [`tracking_pressure`] with `sign(x3)` supplied by the caller, e.g. from
/// the friction modes of an event-driven integrator.
pub fn tracking_pressure_signed(
    x1: &DVector<f64>,
    x3: &DVector<f64>,
    xi: &DVector<f64>,
    r3: &DVector<f64>,
    signs: &DVector<f64>,
    gains: &GainSet,
    c_p: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = c_p.nrows();
    check_len("x1", n, x1.len())?;
    check_len("x3", n, x3.len())?;
    check_len("r3", n, r3.len())?;
    check_len("signs", n, signs.len())?;
    check_len("xi", c_p.ncols(), xi.len())?;
    let integral = (c_p * xi).component_mul(signs) * gains.lambda_xi;
    let fault = x1 * -gains.lambda_delta - (x3 - r3).abs() * gains.lambda_v - r3.abs() * gains.lambda_v + integral;
    Ok(c_p.tr_mul(&fault))
}

/// `xi' = C_t (r3 - x3)`.
pub fn integral_update(x3: &DVector<f64>, r3: &DVector<f64>, c_t: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_len("x3", c_t.ncols(), x3.len())?;
    check_len("r3", c_t.ncols(), r3.len())?;
    Ok(c_t * (r3 - x3))
}

/// State-dependent quantities entering the compensated well pressure.
#[derive(Debug, Clone, Copy)]
pub struct CompensationInputs<'a> {
    pub x1: &'a DVector<f64>,
    pub x3: &'a DVector<f64>,
    /// Slip acceleration from the nominal model.
    pub x3_dot: &'a DVector<f64>,
    pub xi: &'a DVector<f64>,
    pub r3: &'a DVector<f64>,
    pub r3_dot: &'a DVector<f64>,
    /// Resolved `sign(x3)`; derived from `x3` and the stuck rule when absent.
    pub signs: Option<&'a DVector<f64>>,
}

/// Invertibility check and inverse of the diffusivity matrix.
pub fn actuator_inverse(c_h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !c_h.is_square() {
        return Err(Error::Config("C_h must be square".into()));
    }
    c_h.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Config("actuator matrix C_h is singular".into()))
}

/// Nominal well pressure `C_h^-1 d/dt p_bar + p_bar`, with the sign matrices
/// held constant over the derivative.
pub fn nominal_well_pressure(
    inp: &CompensationInputs<'_>,
    gains: &GainSet,
    c_p: &DMatrix<f64>,
    c_h_inv: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let c_t = gains.output_matrix()?;
    let n = c_p.nrows();
    check_len("x3_dot", n, inp.x3_dot.len())?;
    check_len("r3_dot", n, inp.r3_dot.len())?;
    check_len("C_h", c_p.ncols(), c_h_inv.nrows())?;
    let s = match inp.signs {
        Some(s) => s.clone(),
        None => direction_signs(inp.x3, inp.r3, gains.stuck_sign),
    };
    let p_bar = tracking_pressure_signed(inp.x1, inp.x3, inp.xi, inp.r3, &s, gains, c_p)?;
    let e = inp.x3 - inp.r3;
    let s_e = e.map(sgn);
    let s_r = inp.r3.map(sgn);
    let xi_dot = c_t * (inp.r3 - inp.x3);
    let fault_rate = inp.x3.abs() * -gains.lambda_delta
        - s_e.component_mul(&(inp.x3_dot - inp.r3_dot)) * gains.lambda_v
        - s_r.component_mul(inp.r3_dot) * gains.lambda_v
        + s.component_mul(&(c_p * xi_dot)) * gains.lambda_xi;
    Ok(p_bar + c_h_inv * c_p.tr_mul(&fault_rate))
}

/// Well pressure `p_inf = p_bar_inf - mu_min C_p^T |x3|`.
pub fn compensated_well_pressure(
    inp: &CompensationInputs<'_>,
    gains: &GainSet,
    c_p: &DMatrix<f64>,
    c_h_inv: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let nominal = nominal_well_pressure(inp, gains, c_p, c_h_inv)?;
    Ok(nominal - c_p.tr_mul(&inp.x3.abs()) * gains.mu_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_gains() -> GainSet {
        GainSet::default()
    }

    #[test]
    fn gain_thresholds_reproduced() {
        let r = validate_gains(&paper_gains());
        assert_eq!(r.delta_threshold, 4.16);
        assert_eq!(r.v_threshold, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn gain_boundary_fails() {
        let mut g = paper_gains();
        g.lambda_delta = (g.l_delta + 1.0) / g.mu_min;
        assert!(!validate_gains(&g).passed);
        g.lambda_delta = 40.0;
        g.lambda_v = 0.0;
        g.l_v = 0.01;
        assert!(!validate_gains(&g).passed);
    }

    #[test]
    fn pseudoinverse_examples() {
        let c_p = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let c_t = left_pseudoinverse(&c_p).unwrap();
        assert_relative_eq!(c_t, DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), epsilon = 1e-15);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let orth = DMatrix::from_row_slice(3, 2, &[s, 0.0, s, 0.0, 0.0, 1.0]);
        assert_relative_eq!(left_pseudoinverse(&orth).unwrap(), orth.transpose(), epsilon = 1e-14);
        let bad = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(left_pseudoinverse(&bad).is_err());
    }

    #[test]
    fn pseudoinverse_against_normal_equations() {
        let c_p = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin() + if i == j { 2.0 } else { 0.0 });
        let normal = (c_p.transpose() * &c_p).try_inverse().unwrap() * c_p.transpose();
        assert_relative_eq!(left_pseudoinverse(&c_p).unwrap(), normal, epsilon = 1e-12);
    }

    #[test]
    fn reference_identities() {
        let p = ReferenceParams::default();
        assert_eq!(reference(0.0, &p), (0.0, 0.0));
        assert_eq!(reference(p.t_op, &p), (0.5, 0.0));
        assert_eq!(reference(p.t_op / 2.0, &p).0, 0.25);
        assert_eq!(p.eval(p.t_op * 2.0).r, 0.5);
        // Interior polynomial endpoint values, evaluated without the clamp.
        let s = 1.0f64;
        assert_eq!(0.5 * s * s * s * (10.0 - 15.0 * s + 6.0 * s * s), 0.5);
    }

    #[test]
    fn reference_derivatives_match_finite_differences() {
        let p = ReferenceParams { d_max: 0.5, t_op: 100.0 };
        for &t in &[5.0, 31.0, 50.0, 77.0] {
            let h = 1e-4;
            let fd = (p.eval(t + h).r - p.eval(t - h).r) / (2.0 * h);
            assert_relative_eq!(p.eval(t).r_dot, fd, max_relative = 1e-8);
            let fd2 = (p.eval(t + h).r_dot - p.eval(t - h).r_dot) / (2.0 * h);
            assert_relative_eq!(p.eval(t).r_ddot, fd2, epsilon = 1e-10);
        }
        assert_relative_eq!(p.eval(50.0).r_dot, p.peak_rate(), max_relative = 1e-15);
    }

    #[test]
    fn stabilizing_examples() {
        let c_p = DMatrix::from_element(1, 1, 1.0);
        let g = paper_gains();
        let p = stabilizing_pressure(&DVector::from_element(1, 0.01), &DVector::from_element(1, 0.001), &g, &c_p)
            .unwrap();
        assert_relative_eq!(p[0], -0.7464, epsilon = 1e-12);
        let p0 = stabilizing_pressure(&DVector::zeros(1), &DVector::zeros(1), &g, &c_p).unwrap();
        assert_eq!(p0[0], 0.0);
        let pm = stabilizing_pressure(&DVector::from_element(1, 0.01), &DVector::from_element(1, -0.001), &g, &c_p)
            .unwrap();
        assert_eq!(p, pm);
    }

    #[test]
    fn tracking_examples() {
        let c_p = DMatrix::from_element(1, 1, 1.0);
        let g = paper_gains();
        let x1 = DVector::from_element(1, 0.1);
        let x3 = DVector::from_element(1, 1e-8);
        let xi = DVector::from_element(1, 1e-3);
        let p = tracking_pressure(&x1, &x3, &xi, &x3, &g, &c_p).unwrap();
        // -40 * 0.1 - 0 - 346.4 * 1e-8 + 5e3 * 1 * 1e-3
        assert_relative_eq!(p[0], -4.0 - 3.464e-6 + 5.0, epsilon = 1e-12);
        let z = DVector::zeros(1);
        let collapse = tracking_pressure(&x1, &x3, &z, &z, &g, &c_p).unwrap();
        assert_eq!(collapse, stabilizing_pressure(&x1, &x3, &g, &c_p).unwrap());
    }

    #[test]
    fn integral_examples() {
        let n = 4;
        let c_t = DMatrix::from_element(2, n, 1.0 / n as f64);
        let xi = integral_update(&DVector::from_element(n, 1.0), &DVector::zeros(n), &c_t).unwrap();
        assert_relative_eq!(xi, DVector::from_element(2, -1.0), epsilon = 1e-15);
        let e = DVector::from_vec(vec![0.1, -0.3, 0.2, 0.0]);
        let a = integral_update(&DVector::zeros(n), &e, &c_t).unwrap();
        let b = integral_update(&DVector::zeros(n), &(&e * 2.0), &c_t).unwrap();
        assert_relative_eq!(b, a * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn compensated_pressure_vanishes_at_rest() {
        let c_p = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.5, 0.5, 0.1, 1.0]);
        let g = paper_gains().with_output_matrix(&c_p).unwrap();
        let c_h_inv = actuator_inverse(&(DMatrix::identity(2, 2) * 2.88e-7)).unwrap();
        let z3 = DVector::zeros(3);
        let z2 = DVector::zeros(2);
        let inp = CompensationInputs { x1: &z3, x3: &z3, x3_dot: &z3, xi: &z2, r3: &z3, r3_dot: &z3, signs: None };
        assert_eq!(compensated_well_pressure(&inp, &g, &c_p, &c_h_inv).unwrap(), z2);
    }

    #[test]
    fn compensated_pressure_static_case() {
        // Stuck plant with zero reference: only the nominal pressure remains.
        let c_p = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.5, 0.5, 0.1, 1.0]);
        let g = paper_gains().with_output_matrix(&c_p).unwrap();
        let c_h_inv = actuator_inverse(&(DMatrix::identity(2, 2) * 2.88e-7)).unwrap();
        let x1 = DVector::from_vec(vec![0.1, 0.2, 0.05]);
        let z3 = DVector::zeros(3);
        let xi = DVector::from_vec(vec![0.3, -0.1]);
        let inp = CompensationInputs { x1: &x1, x3: &z3, x3_dot: &z3, xi: &xi, r3: &z3, r3_dot: &z3, signs: None };
        let p_bar = tracking_pressure(&x1, &z3, &xi, &z3, &g, &c_p).unwrap();
        assert_relative_eq!(compensated_well_pressure(&inp, &g, &c_p, &c_h_inv).unwrap(), p_bar, epsilon = 1e-9);
    }

    #[test]
    fn one_dof_expansion_term_by_term() {
        // Scalar expansion written out independently of the vector code.
        let (ld, lv, lx, mu_min) = (40.0, 346.4, 5e3, 0.25);
        let ch = 2.88e-7;
        let (x1, x3, x3d, xi, r3, r3d): (f64, f64, f64, f64, f64, f64) = (0.13, 2.1e-8, -3.0e-15, 4.0e-4, 1.7e-8, 1.0e-16);
        let sgn = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        let expected = -ld * x1 - ld / ch * x3.abs() - lv * (x3 - r3).abs()
            - lv / ch * sgn(x3 - r3) * (x3d - r3d)
            - lv * r3.abs()
            - lv / ch * sgn(r3) * r3d
            + lx * sgn(x3) * xi
            + lx / ch * sgn(x3) * (r3 - x3)
            - mu_min * x3.abs();
        let one = |v: f64| DVector::from_element(1, v);
        let c_p = DMatrix::from_element(1, 1, 1.0);
        let g = paper_gains().with_output_matrix(&c_p).unwrap();
        let (a, b, c, d, e, f) = (one(x1), one(x3), one(x3d), one(xi), one(r3), one(r3d));
        let inp = CompensationInputs { x1: &a, x3: &b, x3_dot: &c, xi: &d, r3: &e, r3_dot: &f, signs: None };
        let got = compensated_well_pressure(&inp, &g, &c_p, &DMatrix::from_element(1, 1, 1.0 / ch)).unwrap();
        assert_relative_eq!(got[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn stuck_sign_rules() {
        let x3 = DVector::from_vec(vec![0.0, -2.0, 0.0]);
        let r3 = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        assert_eq!(direction_signs(&x3, &r3, StuckSign::Zero), DVector::from_vec(vec![0.0, -1.0, 0.0]));
        assert_eq!(direction_signs(&x3, &r3, StuckSign::Reference), DVector::from_vec(vec![1.0, -1.0, 0.0]));
    }
}
