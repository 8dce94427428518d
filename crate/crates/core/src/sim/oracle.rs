//! Independent cross-check: set-valued friction replaced by a saturation of
//! slope `1/boundary_layer` with a rounded corner, integrated with fixed-step two-stage Radau IIA.

use nalgebra::{DMatrix, DVector};

use super::{ControlMode, EventRecord, RunStats, Sample, SimConfig, TailMetrics, Trajectory, Transition};
use crate::control::{stabilizing_pressure, tracking_pressure, validate_gains, GainSet, ReferenceParams};
use crate::error::{Error, Result};
use crate::model::{effective_normal_stress, elastic_force, FaultModel};
use crate::passivity::{monitor_report, storage_v};

const A: [[f64; 2]; 2] = [[5.0 / 12.0, -1.0 / 12.0], [0.75, 0.25]];
const C: [f64; 2] = [1.0 / 3.0, 1.0];

/// An element counts as stuck below this many boundary layers. A load just
/// under capacity creeps at up to `1 + BLEND` layers.
const STICK_LAYERS: f64 = 2.0;

/// Half-width of the quadratic blend that rounds the saturation corner.
const BLEND: f64 = 0.1;

/// Unit-slope saturation with a C1 corner: a plain clamp stalls Newton at
/// the kink, while `tanh` lets loads near capacity creep outside the layer.
fn sat(v: f64) -> f64 {
    let a = v.abs();
    let s = if a <= 1.0 - BLEND {
        a
    } else if a < 1.0 + BLEND {
        1.0 - (1.0 + BLEND - a).powi(2) / (4.0 * BLEND)
    } else {
        1.0
    };
    s.copysign(v)
}

struct Regularized<'a> {
    model: &'a FaultModel,
    gains: &'a GainSet,
    c_t: DMatrix<f64>,
    reference: &'a ReferenceParams,
    mode: ControlMode,
    ramp: f64,
    layer: f64,
}

impl Regularized<'_> {
    fn dim(&self) -> usize {
        let n = self.model.n();
        if self.mode == ControlMode::Track { 3 * n + self.model.q() } else { 3 * n }
    }

    fn pressure(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, q) = (self.model.n(), self.model.q());
        let x1 = y.rows(0, n).into_owned();
        let x3 = y.rows(2 * n, n).into_owned();
        match self.mode {
            ControlMode::OpenLoop => Ok(DVector::from_element(q, self.ramp * t)),
            ControlMode::Stabilize => stabilizing_pressure(&x1, &x3, self.gains, self.model.c_p()),
            _ => {
                let xi = y.rows(3 * n, q).into_owned();
                let r3 = DVector::from_element(n, self.reference.eval(t).r_dot);
                tracking_pressure(&x1, &x3, &xi, &r3, self.gains, self.model.c_p())
            }
        }
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.model;
        let n = m.n();
        let x1 = y.rows(0, n).map(|v| v.max(0.0));
        let x2 = y.rows(n, n).into_owned();
        let x3 = y.rows(2 * n, n).into_owned();
        let p = self.pressure(t, y)?;
        let sigma = effective_normal_stress(&p, m)?;
        let fric = m.friction();
        let delta0 = m.delta0();
        let friction = DVector::from_fn(n, |i, _| {
            fric.mu(x1[i] + delta0[i]) * sigma[i] * sat(x3[i] / self.layer) - m.f_s_star()[i]
        });
        let net = elastic_force(&x2, &x3, m)? - friction;
        let acc = m.mass().clone().cholesky().ok_or(Error::Singular("mass"))?.solve(&net);
        let mut dy = DVector::zeros(self.dim());
        dy.rows_mut(0, n).copy_from(&x3.abs());
        dy.rows_mut(n, n).copy_from(&x3);
        dy.rows_mut(2 * n, n).copy_from(&acc);
        if self.mode == ControlMode::Track {
            let r3 = DVector::from_element(n, self.reference.eval(t).r_dot);
            dy.rows_mut(3 * n, m.q()).copy_from(&(&self.c_t * (r3 - x3)));
        }
        Ok(dy)
    }

    fn jacobian(&self, t: f64, y: &DVector<f64>, f: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = y.len();
        let mut j = DMatrix::zeros(d, d);
        let mut yp = y.clone();
        for k in 0..d {
            let scale = if k >= 2 * self.model.n() && k < 3 * self.model.n() { self.layer } else { 1e-2 };
            let e = 1e-7 * y[k].abs().max(scale);
            yp[k] = y[k] + e;
            let fp = self.rhs(t, &yp)?;
            j.set_column(k, &((fp - f) / e));
            yp[k] = y[k];
        }
        Ok(j)
    }

    /// One Radau IIA step with full Newton on the stage equations.
    fn step(&self, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        let d = y.len();
        let f0 = self.rhs(t, y)?;
        let mut z = DVector::zeros(2 * d);
        for s in 0..2 {
            z.rows_mut(s * d, d).copy_from(&(&f0 * (C[s] * h)));
        }
        let residual = |z: &DVector<f64>| -> Result<(DVector<f64>, [DVector<f64>; 2])> {
            let ys = [y + z.rows(0, d), y + z.rows(d, d)];
            let fs = [self.rhs(t + C[0] * h, &ys[0])?, self.rhs(t + C[1] * h, &ys[1])?];
            let mut r = z.clone();
            for s in 0..2 {
                let mut acc = r.rows(s * d, d).into_owned();
                for k in 0..2 {
                    acc -= &fs[k] * (h * A[s][k]);
                }
                r.rows_mut(s * d, d).copy_from(&acc);
            }
            Ok((r, ys))
        };
        let scale = |v: &DVector<f64>| {
            (0..2 * d).map(|k| (v[k] / (1e-12 + 1e-10 * y[k % d].abs())).powi(2)).sum::<f64>().sqrt()
        };
        let (mut r, mut ys) = residual(&z)?;
        for _ in 0..60 {
            if scale(&r) <= 1.0 {
                return Ok(y + z.rows(d, d));
            }
            let mut jac = DMatrix::identity(2 * d, 2 * d);
            for k in 0..2 {
                let fk = self.rhs(t + C[k] * h, &ys[k])?;
                let jk = self.jacobian(t + C[k] * h, &ys[k], &fk)?;
                for s in 0..2 {
                    let mut blk = jac.view_mut((s * d, k * d), (d, d));
                    blk -= &jk * (h * A[s][k]);
                }
            }
            let dz = jac.lu().solve(&(-&r)).ok_or(Error::Singular("oracle Newton matrix"))?;
            let before = r.norm();
            let mut lam = 1.0;
            loop {
                let trial = &z + &dz * lam;
                let (rt, yt) = residual(&trial)?;
                if rt.norm() < before || lam < 1e-4 {
                    z = trial;
                    r = rt;
                    ys = yt;
                    break;
                }
                lam *= 0.5;
            }
        }
        Err(Error::Integration { t, reason: "oracle Newton iteration did not converge".into() })
    }

    /// `step`, split into halves recursively when Newton fails.
    fn step_split(&self, t: f64, y: &DVector<f64>, h: f64, depth: usize) -> Result<DVector<f64>> {
        match self.step(t, y, h) {
            Err(Error::Integration { .. }) if depth < 30 => {
                let mid = self.step_split(t, y, 0.5 * h, depth + 1)?;
                self.step_split(t + 0.5 * h, &mid, 0.5 * h, depth + 1)
            }
            other => other,
        }
    }
}

/// Runs the regularized model with fixed step `config.dt_init` up to
/// `config.t_end`. Events are the crossings of `|x3_i| = 2 boundary_layer`:
/// leaving the layer counts as stick to slip, entering it as slip to stick.
/// Supports `OpenLoop`, `Stabilize` and `Track`.
pub fn regularized_oracle_run(
    model: &FaultModel,
    gains: &GainSet,
    reference: &ReferenceParams,
    config: &SimConfig,
    boundary_layer: f64,
) -> Result<Trajectory> {
    config.validate()?;
    if !(boundary_layer > 0.0 && boundary_layer.is_finite()) {
        return Err(Error::Config(format!("boundary_layer must be > 0, got {boundary_layer}")));
    }
    if !matches!(config.mode, ControlMode::OpenLoop | ControlMode::Stabilize | ControlMode::Track) {
        return Err(Error::Config("the oracle supports open_loop, stabilize and track modes only".into()));
    }
    if config.mode != ControlMode::OpenLoop && !validate_gains(gains).passed {
        return Err(Error::Config("gain condition violated".into()));
    }
    let c_t = match &gains.c_t {
        Some(c) => c.clone(),
        None => gains.clone().with_output_matrix(model.c_p())?.output_matrix()?.clone(),
    };
    let sys = Regularized {
        model,
        gains,
        c_t,
        reference,
        mode: config.mode,
        ramp: config.open_loop_ramp,
        layer: boundary_layer,
    };
    let n = model.n();
    let steps = (config.t_end / config.dt_init).ceil() as usize;
    if steps > config.max_steps {
        return Err(Error::Config(format!("oracle needs {steps} steps, above sim.max_steps")));
    }
    let h = config.t_end / steps as f64;
    let v0 = config.initial_rate();
    let mut y = DVector::zeros(sys.dim());
    y.rows_mut(2 * n, n).fill(v0);
    // Elements start on the slip branch, as in the event-driven engine where
    // the origin has zero stick margin.
    let mut inside = vec![false; n];
    let stuck_below = STICK_LAYERS * boundary_layer;
    let mut events = Vec::new();
    let mut samples = Vec::new();
    let mut vs = Vec::new();
    let (mut peak, mut peak_t) = (0.0f64, 0.0);
    let every = (steps / 2000).max(1);
    let mut t = 0.0;
    for k in 0..=steps {
        if k > 0 {
            y = sys.step_split(t, &y, h, 0)?;
            t = k as f64 * h;
        }
        let x3 = y.rows(2 * n, n).into_owned();
        for i in (0..n).filter(|_| k > 0) {
            let now = x3[i].abs() <= stuck_below;
            if now != inside[i] {
                let transition = if now { Transition::SlipToStick } else { Transition::StickToSlip };
                events.push(EventRecord { t, element: i, transition, observer: false });
                inside[i] = now;
            }
        }
        if x3.amax() > peak {
            peak = x3.amax();
            peak_t = t;
        }
        let x1 = y.rows(0, n).into_owned();
        let x2 = y.rows(n, n).into_owned();
        let v = storage_v(&x1, &x2, &x3, model);
        vs.push(v);
        if k % every == 0 || k == steps {
            let p = sys.pressure(t, &y)?;
            samples.push(Sample {
                t,
                x1,
                x2,
                x3: x3.clone(),
                x3_hat: None,
                xi: (config.mode == ControlMode::Track).then(|| y.rows(3 * n, model.q()).into_owned()),
                p_inf: p.clone(),
                p,
                y_m: x3.mean(),
                v,
                residual: 0.0,
                residual_tol: 0.0,
                metric_e: x3.norm(),
                metric_et: 0.0,
                metric_ep: 0.0,
                estimation_error: 0.0,
                stuck: (0..n).filter(|&i| inside[i]).count(),
            });
        }
    }
    let stats = RunStats { steps, events: events.len(), ..RunStats::default() };
    Ok(Trajectory {
        n,
        q: model.q(),
        mode: config.mode,
        samples,
        events,
        monitor: monitor_report(&[], &[], &vs),
        stats,
        tail: TailMetrics::default(),
        peak_slip_rate: peak,
        peak_slip_rate_time: peak_t,
        fast_phase: None,
        max_stuck_rate: 0.0,
        max_pressure_jump: 0.0,
        initial_slip_rate: v0,
    })
}
