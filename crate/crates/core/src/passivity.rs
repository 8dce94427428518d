//! Storage functions, energy-balance residuals and sampled sector checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::control::{stabilizing_pressure, GainSet};
use crate::error::{check_len, Error, Result};
use crate::model::FaultModel;

/// `V = x1'x1/2 + x2'K x2/2 + x3'M x3/2`.
pub fn storage_v(x1: &DVector<f64>, x2: &DVector<f64>, x3: &DVector<f64>, model: &FaultModel) -> f64 {
    0.5 * (x1.dot(x1) + x2.dot(&(model.stiffness() * x2)) + x3.dot(&(model.mass() * x3)))
}

/// `V_p = p~' C_h^-1 p~ / 2`.
pub fn storage_vp(p_tilde: &DVector<f64>, c_h: &DMatrix<f64>) -> Result<f64> {
    check_len("p_tilde", c_h.nrows(), p_tilde.len())?;
    let chol = c_h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("C_h must be symmetric positive definite".into()))?;
    Ok(0.5 * p_tilde.dot(&chol.solve(p_tilde)))
}

/// Time derivative of `V` along the plant: `x1'|x3| - x3'F_r - x3'H x3`.
pub fn storage_rate(
    x1: &DVector<f64>,
    x3: &DVector<f64>,
    friction: &DVector<f64>,
    model: &FaultModel,
) -> f64 {
    x1.dot(&x3.abs()) - x3.dot(friction) - x3.dot(&(model.viscosity() * x3))
}

/// Per-interval residual `V(t_k+1) - V(t_k) - trapezoid(dV/dt)`.
pub fn dissipation_residual(times: &[f64], v: &[f64], rate: &[f64]) -> Vec<f64> {
    let m = times.len().min(v.len()).min(rate.len());
    (1..m)
        .map(|k| {
            let h = times[k] - times[k - 1];
            v[k] - v[k - 1] - 0.5 * h * (rate[k] + rate[k - 1])
        })
        .collect()
}

/// Summary of residuals against their per-interval tolerances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorReport {
    pub windows: usize,
    pub max_abs_residual: f64,
    /// Largest `|residual| / tolerance`.
    pub worst_ratio: f64,
    /// Windows with ratio in (1, 10].
    pub warnings: usize,
    /// Windows with ratio above 10.
    pub violations: usize,
    pub min_v: f64,
    pub passed: bool,
}

/// Classifies residuals: within tolerance is silent, up to 10x warns, above fails.
pub fn monitor_report(residuals: &[f64], tolerances: &[f64], v: &[f64]) -> MonitorReport {
    let mut worst = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut warnings = 0;
    let mut violations = 0;
    for (r, tol) in residuals.iter().zip(tolerances) {
        let ratio = if *tol > 0.0 { r.abs() / tol } else if *r == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(ratio);
        max_abs = max_abs.max(r.abs());
        if ratio > 10.0 {
            violations += 1;
        } else if ratio > 1.0 {
            warnings += 1;
        }
    }
    let min_v = v.iter().copied().fold(f64::INFINITY, f64::min);
    MonitorReport {
        windows: residuals.len(),
        max_abs_residual: max_abs,
        worst_ratio: worst,
        warnings,
        violations,
        min_v: if v.is_empty() { 0.0 } else { min_v },
        passed: violations == 0 && (v.is_empty() || min_v >= 0.0),
    }
}

/// Sampling box for the probes: `x1` in `[0, x1_max]`, `x3` in `[-x3_max, x3_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateBox {
    pub x1_max: f64,
    pub x3_max: f64,
}

fn sample_slipping(rng: &mut ChaCha8Rng, n: usize, b: &StateBox) -> (DVector<f64>, DVector<f64>) {
    let x1 = DVector::from_fn(n, |_, _| rng.random::<f64>() * b.x1_max);
    let x3 = DVector::from_fn(n, |_, _| {
        let v = (rng.random::<f64>() * 2.0 - 1.0) * b.x3_max;
        if v == 0.0 {
            b.x3_max
        } else {
            v
        }
    });
    (x1, x3)
}

/// `x3'g + l_delta |x3|'x1 + l_v x3'x3` with `g` the slip-branch friction at `p = 0`.
pub fn sector_margin(x1: &DVector<f64>, x3: &DVector<f64>, l_delta: f64, l_v: f64, model: &FaultModel) -> f64 {
    let p0 = DVector::zeros(model.q());
    let Ok((cap, excess)) = model.capacity_and_excess(x1, &p0) else {
        return f64::NAN;
    };
    let mut m = 0.0;
    for i in 0..model.n() {
        if x3[i] == 0.0 {
            continue;
        }
        let g = if x3[i] > 0.0 { excess[i] } else { -cap[i] - model.f_s_star()[i] };
        m += x3[i] * g + l_delta * x3[i].abs() * x1[i] + l_v * x3[i] * x3[i];
    }
    m
}

/// Smallest sector margin over `samples` random slipping states (seeded).
pub fn sector_probe(model: &FaultModel, bx: &StateBox, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = model.friction();
    (0..samples)
        .map(|_| {
            let (x1, x3) = sample_slipping(&mut rng, model.n(), bx);
            sector_margin(&x1, &x3, f.l_delta, f.l_v, model)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `e2'y2 = -x1'|x3| + x3'g - x3' b C_p p` with `b = diag(sign(x3) mu)`.
pub fn passivity_supply(x1: &DVector<f64>, x3: &DVector<f64>, p: &DVector<f64>, model: &FaultModel) -> f64 {
    let cp = model.c_p() * p;
    let mut s = -x1.dot(&x3.abs());
    for i in 0..model.n() {
        if x3[i] == 0.0 {
            continue;
        }
        let mu = model.mu_at(i, x1[i]);
        let g = x3[i].signum() * mu * model.sigma_n()[i] - model.f_s_star()[i];
        s += x3[i] * g - x3[i].abs() * mu * cp[i];
    }
    s
}

/// Smallest `e2'y2` under the stabilizing law over random slipping states.
pub fn passivity_probe(model: &FaultModel, gains: &GainSet, bx: &StateBox, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let (x1, x3) = sample_slipping(&mut rng, model.n(), bx);
        let p = stabilizing_pressure(&x1, &x3, gains, model.c_p())?;
        worst = worst.min(passivity_supply(&x1, &x3, &p, model));
    }
    Ok(worst)
}

/// Distances to the convergence domains with tail averages over the last 5 % of the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceMetrics {
    pub e: Vec<f64>,
    pub et: Vec<f64>,
    pub ep: Vec<f64>,
    pub tail_e: f64,
    pub tail_et: f64,
    pub tail_ep: f64,
}

/// Time-weighted mean of `values` over `[t_end - frac * span, t_end]`.
pub fn tail_average(times: &[f64], values: &[f64], frac: f64) -> f64 {
    let m = times.len().min(values.len());
    if m == 0 {
        return 0.0;
    }
    if m == 1 {
        return values[0];
    }
    let t_end = times[m - 1];
    let t0 = t_end - frac * (t_end - times[0]);
    let mut area = 0.0;
    let mut span = 0.0;
    for k in 1..m {
        let (a, b) = (times[k - 1], times[k]);
        if b <= t0 {
            continue;
        }
        let lo = a.max(t0);
        let w = (lo - a) / (b - a).max(f64::MIN_POSITIVE);
        let v_lo = values[k - 1] + w * (values[k] - values[k - 1]);
        area += 0.5 * (b - lo) * (v_lo + values[k]);
        span += b - lo;
    }
    if span > 0.0 {
        area / span
    } else {
        values[m - 1]
    }
}

/// `|x3|`, `|C_t (r3 - x3)|` and `|p - p_bar|` per sample.
pub fn convergence_metrics(
    times: &[f64],
    x3: &[DVector<f64>],
    r3: &[DVector<f64>],
    p: &[DVector<f64>],
    p_bar: &[DVector<f64>],
    c_t: &DMatrix<f64>,
) -> ConvergenceMetrics {
    let e: Vec<f64> = x3.iter().map(|v| v.norm()).collect();
    let et: Vec<f64> = x3.iter().zip(r3).map(|(x, r)| (c_t * (r - x)).norm()).collect();
    let ep: Vec<f64> = p.iter().zip(p_bar).map(|(a, b)| (a - b).norm()).collect();
    ConvergenceMetrics {
        tail_e: tail_average(times, &e, 0.05),
        tail_et: tail_average(times, &et, 0.05),
        tail_ep: tail_average(times, &ep, 0.05),
        e,
        et,
        ep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FaultModelParts, FrictionParams};
    use approx::assert_relative_eq;

    fn one_dof(sigma: f64) -> FaultModel {
        FaultModel::new(FaultModelParts::at_verge_of_slip(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, sigma),
            DMatrix::from_element(1, 1, 1.0),
            FrictionParams::default(),
        ))
        .unwrap()
    }

    #[test]
    fn storage_examples() {
        let m = one_dof(1.0);
        let z = DVector::zeros(1);
        assert_eq!(storage_v(&z, &z, &z, &m), 0.0);
        let v = storage_v(&DVector::from_element(1, 1.0), &DVector::from_element(1, 2.0), &DVector::from_element(1, 3.0), &m);
        // 0.5 + 0.5 * 3 * 4 + 0.5 * 2 * 9
        assert_eq!(v, 15.5);
    }

    #[test]
    fn storage_vp_examples() {
        let ch = DMatrix::from_element(1, 1, 2.88e-7);
        assert_eq!(storage_vp(&DVector::zeros(1), &ch).unwrap(), 0.0);
        let one = storage_vp(&DVector::from_element(1, 1.0), &ch).unwrap();
        assert_relative_eq!(one, 1.736_111_111_111_111e6, max_relative = 1e-14);
        let two = storage_vp(&DVector::from_element(1, 2.0), &ch).unwrap();
        assert_relative_eq!(two, 4.0 * one, max_relative = 1e-14);
        assert!(storage_vp(&DVector::zeros(1), &DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn residual_of_stationary_trajectory_is_zero() {
        let r = dissipation_residual(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0], &[0.0, 0.0, 0.0]);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn residual_of_damped_oscillator_is_quadrature_sized() {
        // x'' + 2 z w x' + w^2 x = 0 with E = (x'^2 + w^2 x^2) / 2 and E' = -2 z w x'^2.
        let (w, z) = (2.0f64, 0.1f64);
        let wd = w * (1.0 - z * z).sqrt();
        let x = |t: f64| (-z * w * t).exp() * (wd * t).cos();
        let v = |t: f64| (-z * w * t).exp() * (-z * w * (wd * t).cos() - wd * (wd * t).sin());
        let h = 1e-3;
        let times: Vec<f64> = (0..=2000).map(|k| k as f64 * h).collect();
        let e: Vec<f64> = times.iter().map(|&t| 0.5 * (v(t) * v(t) + w * w * x(t) * x(t))).collect();
        let rate: Vec<f64> = times.iter().map(|&t| -2.0 * z * w * v(t) * v(t)).collect();
        let res = dissipation_residual(&times, &e, &rate);
        // Trapezoid error h^3 |f''| / 12 with |f''| <= 2 z w * 2 (w^2)^2 bounded by 13.
        let bound = h.powi(3) * 13.0 / 12.0;
        assert!(res.iter().all(|r| r.abs() <= bound), "{}", res.iter().fold(0.0f64, |a, r| a.max(r.abs())));
    }

    #[test]
    fn sector_holds_with_rule_slope() {
        let m = one_dof(3.99);
        assert!(sector_probe(&m, &StateBox { x1_max: 2.0, x3_max: 1.0 }, 20_000, 7) >= 0.0);
    }

    #[test]
    fn sector_fails_without_slope() {
        let m = one_dof(3.99);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bx = StateBox { x1_max: 2.0, x3_max: 1.0 };
        let worst = (0..1000)
            .map(|_| {
                let (x1, x3) = sample_slipping(&mut rng, 1, &bx);
                sector_margin(&x1, &x3, 0.0, 0.0, &m)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(worst < 0.0);
    }

    #[test]
    fn zero_velocity_contributes_nothing() {
        let m = one_dof(3.99);
        assert_eq!(sector_margin(&DVector::from_element(1, 1.0), &DVector::zeros(1), 0.04, 0.0, &m), 0.0);
    }

    #[test]
    fn tail_average_of_constant_and_ramp() {
        let t: Vec<f64> = (0..=100).map(|k| k as f64).collect();
        assert_relative_eq!(tail_average(&t, &vec![2.0; 101], 0.05), 2.0);
        let ramp: Vec<f64> = t.clone();
        assert_relative_eq!(tail_average(&t, &ramp, 0.05), 97.5, epsilon = 1e-12);
    }

    #[test]
    fn exact_tracking_metrics_vanish() {
        let c_t = DMatrix::from_element(1, 2, 0.5);
        let x = vec![DVector::zeros(2); 3];
        let m = convergence_metrics(&[0.0, 1.0, 2.0], &x, &x, &x[..].iter().map(|_| DVector::zeros(1)).collect::<Vec<_>>(), &vec![DVector::zeros(1); 3], &c_t);
        assert_eq!(m.tail_e + m.tail_et + m.tail_ep, 0.0);
    }
}
