//! One-step TR-BDF2 with a shared iteration matrix and an embedded error
//! estimate. Components flagged as frozen keep their value over the step and
//! are removed from the Newton unknowns.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::Result;

pub const GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

/// Leading error constant of the scheme, `(-3g^2 + 4g - 2) / (12 (2 - g))`.
pub fn error_constant() -> f64 {
    let g = GAMMA;
    (-3.0 * g * g + 4.0 * g - 2.0) / (12.0 * (2.0 - g))
}

/// Newton iterations stop once the increment, in error-weighted norm, is
/// this fraction of the local error tolerance.
const NEWTON_KAPPA: f64 = 0.03;

/// Right-hand side of `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>>;
    /// Components with an identically zero derivative for the current modes.
    fn frozen(&self) -> Vec<bool> {
        vec![false; self.dim()]
    }
    /// Scale used for finite-difference increments.
    fn typical(&self) -> DVector<f64> {
        DVector::from_element(self.dim(), 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: DVector<f64>,
}

impl Tolerances {
    /// Weighted root-mean-square norm with weights `atol + rtol max(|a|, |b|)`.
    pub fn wrms(&self, v: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let n = v.len();
        if n == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            let w = self.atol[i] + self.rtol * a[i].abs().max(b[i].abs());
            let r = v[i] / w;
            s += r * r;
        }
        (s / n as f64).sqrt()
    }

    /// Per-component weight `atol + rtol |y|`.
    pub fn weight(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |i, _| self.atol[i] + self.rtol * y[i].abs())
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSettings {
    /// Newton also stops once every component's correction is below `tol` times its value.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct StepOk {
    pub y: DVector<f64>,
    pub f: DVector<f64>,
    pub y_gamma: DVector<f64>,
    pub f_gamma: DVector<f64>,
    /// Weighted norm of the filtered local error estimate.
    pub err: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Done(StepOk),
    NewtonFailed,
}

#[derive(Debug, Clone, Default)]
pub struct Stats {
    pub rhs_evals: usize,
    pub jacobians: usize,
    pub factorizations: usize,
    pub newton_failures: usize,
}

/// Stepper state: cached Jacobian and iteration matrix factorization.
pub struct Trbdf2 {
    pub tol: Tolerances,
    pub newton: NewtonSettings,
    jac: Option<DMatrix<f64>>,
    /// Active index set and `c = gamma h / 2` of the current factorization.
    lu: Option<(Vec<usize>, f64, LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
    pub jac_fresh: bool,
    pub stats: Stats,
}

impl Trbdf2 {
    pub fn new(tol: Tolerances, newton: NewtonSettings) -> Self {
        Self { tol, newton, jac: None, lu: None, jac_fresh: false, stats: Stats::default() }
    }

    /// Drops the cached Jacobian; the next step recomputes it.
    pub fn invalidate(&mut self) {
        self.jac = None;
        self.lu = None;
        self.jac_fresh = false;
    }

    fn active(frozen: &[bool]) -> Vec<usize> {
        (0..frozen.len()).filter(|&i| !frozen[i]).collect()
    }

    /// Forward-difference Jacobian of the active columns.
    pub fn compute_jacobian<S: OdeSystem>(&mut self, sys: &S, t: f64, y: &DVector<f64>, f: &DVector<f64>) -> Result<()> {
        let n = sys.dim();
        let frozen = sys.frozen();
        let typ = sys.typical();
        let mut jac = DMatrix::zeros(n, n);
        let sq = f64::EPSILON.sqrt();
        let mut yp = y.clone();
        for j in Self::active(&frozen) {
            let d = sq * y[j].abs().max(typ[j]);
            let orig = yp[j];
            yp[j] = orig + d;
            let d = yp[j] - orig;
            let fp = sys.rhs(t, &yp)?;
            self.stats.rhs_evals += 1;
            jac.set_column(j, &((fp - f) / d));
            yp[j] = orig;
        }
        self.jac = Some(jac);
        self.lu = None;
        self.jac_fresh = true;
        self.stats.jacobians += 1;
        Ok(())
    }

    fn factor(&mut self, active: &[usize], c: f64) -> bool {
        if let Some((a, cc, _)) = &self.lu {
            if a == active && *cc == c {
                return true;
            }
        }
        let jac = match &self.jac {
            Some(j) => j,
            None => return false,
        };
        let m = active.len();
        let w = DMatrix::from_fn(m, m, |a, b| {
            let v = -c * jac[(active[a], active[b])];
            if a == b {
                1.0 + v
            } else {
                v
            }
        });
        let lu = w.lu();
        if !lu.is_invertible() {
            return false;
        }
        self.lu = Some((active.to_vec(), c, lu));
        self.stats.factorizations += 1;
        true
    }

    fn solve(&self, rhs: &DVector<f64>, active: &[usize]) -> DVector<f64> {
        let (_, _, lu) = self.lu.as_ref().expect("factorized");
        let r = DVector::from_fn(active.len(), |a, _| rhs[active[a]]);
        let s = lu.solve(&r).unwrap_or(r);
        let mut out = DVector::zeros(rhs.len());
        for (a, &i) in active.iter().enumerate() {
            out[i] = s[a];
        }
        out
    }

    /// Solves `z = base + c f(t, z)` for the active components by modified Newton.
    fn stage<S: OdeSystem>(
        &mut self,
        sys: &S,
        t: f64,
        base: &DVector<f64>,
        guess: DVector<f64>,
        c: f64,
        active: &[usize],
        scale_ref: &DVector<f64>,
    ) -> Result<Option<(DVector<f64>, DVector<f64>, usize)>> {
        let mut z = guess;
        let mut prev = f64::INFINITY;
        for it in 1..=self.newton.max_iter {
            let fz = sys.rhs(t, &z)?;
            self.stats.rhs_evals += 1;
            if fz.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            let mut res = &z - base - &fz * c;
            for (i, r) in res.iter_mut().enumerate() {
                if !active.binary_search(&i).is_ok() {
                    *r = 0.0;
                }
            }
            let dz = self.solve(&(-res), active);
            z += &dz;
            let norm = self.tol.wrms(&dz, &z, scale_ref);
            if !norm.is_finite() || (it > 2 && norm > 2.0 * prev) {
                return Ok(None);
            }
            let relative = dz.iter().zip(z.iter()).all(|(d, v)| d.abs() <= self.newton.tol * v.abs());
            if relative || norm <= NEWTON_KAPPA || (it > 1 && prev > 0.0 && {
                let rate = norm / prev;
                rate < 1.0 && rate / (1.0 - rate) * norm <= NEWTON_KAPPA
            }) {
                let fz = sys.rhs(t, &z)?;
                self.stats.rhs_evals += 1;
                return Ok(Some((z, fz, it)));
            }
            prev = norm;
        }
        Ok(None)
    }

    /// One composite step of size `h` from `(t, y)` with `f = f(t, y)`.
    pub fn step<S: OdeSystem>(&mut self, sys: &S, t: f64, y: &DVector<f64>, f: &DVector<f64>, h: f64) -> Result<StepOutcome> {
        let frozen = sys.frozen();
        let active = Self::active(&frozen);
        if self.jac.is_none() {
            self.compute_jacobian(sys, t, y, f)?;
        }
        let c = GAMMA * h / 2.0;
        if !self.factor(&active, c) {
            return Ok(StepOutcome::NewtonFailed);
        }
        let g = GAMMA;

        let base1 = y + f * c;
        let guess1 = y + f * (g * h);
        let Some((yg, fg, it1)) = self.stage(sys, t + g * h, &base1, guess1, c, &active, y)? else {
            self.stats.newton_failures += 1;
            return Ok(StepOutcome::NewtonFailed);
        };

        let a = 1.0 / (g * (2.0 - g));
        // Same as [y_g - (1-g)^2 y] a, written so a fixed point stays exact.
        let base2 = y + (&yg - y) * a;
        let guess2 = y + (&yg - y) / g;
        let Some((y1, f1, it2)) = self.stage(sys, t + h, &base2, guess2, c, &active, y)? else {
            self.stats.newton_failures += 1;
            return Ok(StepOutcome::NewtonFailed);
        };

        let k = (-3.0 * g * g + 4.0 * g - 2.0) / (6.0 * (2.0 - g)) * h;
        let mut est = (f / g - &fg / (g * (1.0 - g)) + &f1 / (1.0 - g)) * k;
        for i in 0..est.len() {
            if frozen[i] {
                est[i] = 0.0;
            }
        }
        let filtered = self.solve(&est, &active);
        let err = self.tol.wrms(&filtered, y, &y1);
        Ok(StepOutcome::Done(StepOk { y: y1, f: f1, y_gamma: yg, f_gamma: fg, err, iterations: it1 + it2 }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        a: DMatrix<f64>,
    }

    impl OdeSystem for Linear {
        fn dim(&self) -> usize {
            self.a.nrows()
        }
        fn rhs(&self, _t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.a * y)
        }
    }

    fn stepper(n: usize) -> Trbdf2 {
        Trbdf2::new(
            Tolerances { rtol: 1e-10, atol: DVector::from_element(n, 1e-14) },
            NewtonSettings { tol: 1e-14, max_iter: 20 },
        )
    }

    #[test]
    fn error_constant_value() {
        // With g = 2 - sqrt(2) the expression reduces to 2/3 - 1/sqrt(2).
        let exact = 2.0 / 3.0 - std::f64::consts::FRAC_1_SQRT_2;
        assert!((error_constant() - exact).abs() < 1e-15, "{}", error_constant());
    }

    #[test]
    fn scalar_decay_matches_closed_form_update() {
        // For y' = l y: y_g = y (1 + c l) / (1 - c l), then
        // y1 = [y_g - (1-g)^2 y] / (g (2 - g)) / (1 - c l).
        let l = -1.0;
        let h = 0.3;
        let sys = Linear { a: DMatrix::from_element(1, 1, l) };
        let mut s = stepper(1);
        let y0 = DVector::from_element(1, 1.0);
        let f0 = sys.rhs(0.0, &y0).unwrap();
        let StepOutcome::Done(r) = s.step(&sys, 0.0, &y0, &f0, h).unwrap() else { panic!() };
        let g = GAMMA;
        let c = g * h / 2.0;
        let yg = (1.0 + c * l) / (1.0 - c * l);
        let y1 = (yg - (1.0 - g) * (1.0 - g)) / (g * (2.0 - g)) / (1.0 - c * l);
        assert!((r.y[0] - y1).abs() < 1e-12, "{} vs {}", r.y[0], y1);
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let sys = Linear { a: DMatrix::zeros(2, 2) };
        let mut s = stepper(2);
        let y0 = DVector::from_vec(vec![1.5, -2.0]);
        let f0 = DVector::zeros(2);
        let StepOutcome::Done(r) = s.step(&sys, 0.0, &y0, &f0, 1.0).unwrap() else { panic!() };
        assert_eq!(r.y, y0);
        assert_eq!(r.err, 0.0);
    }

    #[test]
    fn error_estimate_tracks_true_local_error() {
        let sys = Linear { a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.4]) };
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let f0 = sys.rhs(0.0, &y0).unwrap();
        let h = 0.01;
        let mut s = stepper(2);
        s.tol = Tolerances { rtol: 0.0, atol: DVector::from_element(2, 1.0) };
        let StepOutcome::Done(r) = s.step(&sys, 0.0, &y0, &f0, h).unwrap() else { panic!() };
        let exact = (sys.a.clone() * h).exp() * &y0;
        let true_err = (r.y - exact).norm();
        let ratio = r.err * 2f64.sqrt() / true_err;
        assert!(ratio > 0.7 && ratio < 1.4, "estimate / true = {ratio}");
    }

    #[test]
    fn frozen_components_do_not_move() {
        struct Frozen;
        impl OdeSystem for Frozen {
            fn dim(&self) -> usize {
                2
            }
            fn rhs(&self, _t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(DVector::from_vec(vec![-y[0] + y[1], 0.0]))
            }
            fn frozen(&self) -> Vec<bool> {
                vec![false, true]
            }
        }
        let mut s = stepper(2);
        let y0 = DVector::from_vec(vec![0.0, 2.0]);
        let f0 = Frozen.rhs(0.0, &y0).unwrap();
        let StepOutcome::Done(r) = s.step(&Frozen, 0.0, &y0, &f0, 0.1).unwrap() else { panic!() };
        assert_eq!(r.y[1], 2.0);
        assert!(r.y[0] > 0.0);
    }
}
