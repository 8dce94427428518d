//! Event-driven integration of the plant with its controller, actuator,
//! integral state and observer.

pub mod events;
pub mod oracle;
pub mod trbdf2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{
    actuator_inverse, compensated_well_pressure, stabilizing_pressure, tracking_pressure_signed, validate_gains,
    CompensationInputs, GainSet, ReferenceParams, StuckSign,
};
use crate::error::{Error, Result};
use crate::model::{classify_rest, plant_forces, Direction, FaultModel, Mode};
use crate::observer::{hurwitz_check, injection_force, ObserverConfig};
use crate::passivity::{monitor_report, storage_v, MonitorReport};
use crate::scenario::Scenario;
use events::{illinois, Hermite};
use trbdf2::{NewtonSettings, OdeSystem, StepOk, StepOutcome, Tolerances, Trbdf2, GAMMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    OpenLoop,
    Stabilize,
    Track,
    TrackWithActuator,
    TrackWithActuatorAndObserver,
}

impl ControlMode {
    pub fn has_integral(self) -> bool {
        matches!(self, Self::Track | Self::TrackWithActuator | Self::TrackWithActuatorAndObserver)
    }
    pub fn has_actuator(self) -> bool {
        matches!(self, Self::TrackWithActuator | Self::TrackWithActuatorAndObserver)
    }
    pub fn has_observer(self) -> bool {
        matches!(self, Self::TrackWithActuatorAndObserver)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub mode: ControlMode,
    /// Final time [s].
    pub t_end: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub rtol: f64,
    /// Absolute tolerance on slip and displacement [m].
    pub atol_slip: f64,
    /// Absolute tolerance on slip-rate [m/s].
    pub atol_rate: f64,
    /// Absolute tolerance on the integral state.
    pub atol_integral: f64,
    /// Absolute tolerance on fault pressure.
    pub atol_pressure: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Tolerance on slip-rate event functions [m/s].
    pub event_tol: f64,
    /// Tolerance on break-away event functions (force units).
    pub event_force_tol: f64,
    pub stick_velocity_floor: f64,
    /// Uniform slip-rate at `t = 0`; unset means `1e-12` m/s open loop and 0 otherwise.
    pub initial_slip_rate: Option<f64>,
    /// Open-loop injection ramp applied to every well [pressure/s].
    pub open_loop_ramp: f64,
    /// Largest slip increment per step used to cap the step size [m].
    pub max_slip_per_step: f64,
    /// Record a sample when the peak slip-rate moves by this many decades.
    pub record_decades: f64,
    /// Record at least one sample per interval [s]; unset means `t_end / 1000`.
    pub record_interval: Option<f64>,
    /// Steps between Jacobian refreshes when nothing else forces one.
    pub jacobian_max_age: usize,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: ControlMode::TrackWithActuatorAndObserver,
            t_end: 360.0 * 86_400.0,
            dt_init: 1e-3,
            dt_min: 1e-12,
            dt_max: 86_400.0,
            rtol: 1e-6,
            atol_slip: 1e-9,
            atol_rate: 1e-14,
            atol_integral: 1e-9,
            atol_pressure: 1e-9,
            newton_tol: 1e-10,
            newton_max_iter: 10,
            event_tol: 1e-12,
            event_force_tol: 1e-10,
            stick_velocity_floor: 1e-14,
            initial_slip_rate: None,
            open_loop_ramp: 0.0,
            max_slip_per_step: 1e-3,
            record_decades: 0.05,
            record_interval: None,
            jacobian_max_age: 200,
            max_steps: 5_000_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.t_end > 0.0) {
            return err(format!("sim.t_end must be > 0, got {}", self.t_end));
        }
        if !(0.0 < self.dt_min && self.dt_min <= self.dt_init && self.dt_init <= self.dt_max) {
            return err(format!(
                "sim step sizes must satisfy 0 < dt_min <= dt_init <= dt_max, got {} / {} / {}",
                self.dt_min, self.dt_init, self.dt_max
            ));
        }
        let positive = [
            ("sim.rtol", self.rtol),
            ("sim.atol_slip", self.atol_slip),
            ("sim.atol_rate", self.atol_rate),
            ("sim.atol_integral", self.atol_integral),
            ("sim.atol_pressure", self.atol_pressure),
            ("sim.newton_tol", self.newton_tol),
            ("sim.event_tol", self.event_tol),
            ("sim.event_force_tol", self.event_force_tol),
            ("sim.stick_velocity_floor", self.stick_velocity_floor),
            ("sim.max_slip_per_step", self.max_slip_per_step),
            ("sim.record_decades", self.record_decades),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.newton_max_iter == 0 || self.max_steps == 0 || self.jacobian_max_age == 0 {
            return err("sim.newton_max_iter, sim.max_steps and sim.jacobian_max_age must be >= 1".into());
        }
        if let Some(v) = self.initial_slip_rate {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("sim.initial_slip_rate must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn initial_rate(&self) -> f64 {
        self.initial_slip_rate
            .unwrap_or(if self.mode == ControlMode::OpenLoop { 1e-12 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Transition {
    StickToSlip,
    SlipToStick,
    Reversal,
}

impl Transition {
    pub fn label(self) -> &'static str {
        match self {
            Transition::StickToSlip => "stick_to_slip",
            Transition::SlipToStick => "slip_to_stick",
            Transition::Reversal => "reversal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventRecord {
    pub t: f64,
    pub element: usize,
    pub transition: Transition,
    /// Event of the observer copy rather than the plant.
    pub observer: bool,
}

/// Recorded sample. Vectors are per element (`x*`) or per well (`xi`, `p`, `p_inf`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
    pub x3: DVector<f64>,
    pub x3_hat: Option<DVector<f64>>,
    pub xi: Option<DVector<f64>>,
    pub p: DVector<f64>,
    pub p_inf: DVector<f64>,
    pub y_m: f64,
    pub v: f64,
    /// Energy-balance residual accumulated since the previous sample.
    pub residual: f64,
    pub residual_tol: f64,
    pub metric_e: f64,
    pub metric_et: f64,
    pub metric_ep: f64,
    pub estimation_error: f64,
    pub stuck: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub steps: usize,
    pub rejected: usize,
    pub newton_failures: usize,
    pub jacobians: usize,
    pub factorizations: usize,
    pub rhs_evals: usize,
    pub events: usize,
    pub event_refinement_misses: usize,
}

/// Tail averages over the last 5 % of the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TailMetrics {
    pub e: f64,
    pub et: f64,
    pub ep: f64,
    /// Full-state estimation error `|x - x_hat|`.
    pub estimation_error: f64,
    /// Slip-rate estimation error `|x3 - x3_hat|`.
    pub rate_estimation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub q: usize,
    pub mode: ControlMode,
    pub samples: Vec<Sample>,
    pub events: Vec<EventRecord>,
    pub monitor: MonitorReport,
    pub stats: RunStats,
    pub tail: TailMetrics,
    pub peak_slip_rate: f64,
    pub peak_slip_rate_time: f64,
    /// Interval where the peak slip-rate exceeds `1e-3` of its maximum.
    pub fast_phase: Option<(f64, f64)>,
    /// Largest `|x3_i|` of any stuck element over accepted steps (should be 0).
    pub max_stuck_rate: f64,
    /// Largest pressure jump across an event.
    pub max_pressure_jump: f64,
    pub initial_slip_rate: f64,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn final_mean_slip(&self) -> f64 {
        self.last().map_or(0.0, |s| s.x1.mean())
    }
}

/// Integration failure with the trajectory accumulated so far.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Option<Box<Trajectory>>,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    q: usize,
    xi: Option<usize>,
    p: Option<usize>,
    obs: Option<usize>,
    dim: usize,
}

impl Layout {
    fn new(n: usize, q: usize, mode: ControlMode) -> Self {
        let mut dim = 3 * n;
        let mut take = |on: bool, len: usize| {
            on.then(|| {
                let at = dim;
                dim += len;
                at
            })
        };
        let xi = take(mode.has_integral(), q);
        let p = take(mode.has_actuator(), q);
        let obs = take(mode.has_observer(), 3 * n);
        Self { n, q, xi, p, obs, dim }
    }

    fn x1(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(0, self.n).into_owned()
    }
    fn x2(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(self.n, self.n).into_owned()
    }
    fn x3(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(2 * self.n, self.n).into_owned()
    }
    fn obs_block(&self, y: &DVector<f64>, k: usize) -> Option<DVector<f64>> {
        self.obs.map(|o| y.rows(o + k * self.n, self.n).into_owned())
    }
}

/// Everything the right-hand side produces at one state.
struct Eval {
    dy: DVector<f64>,
    p: DVector<f64>,
    p_inf: DVector<f64>,
    p_bar: Option<DVector<f64>>,
    y_m: f64,
    plant_friction: DVector<f64>,
    plant_load: DVector<f64>,
    plant_margin: DVector<f64>,
    obs_load: Option<DVector<f64>>,
    obs_margin: Option<DVector<f64>>,
}

/// Closed-loop system under frozen friction modes.
pub struct ClosedLoop<'a> {
    model: &'a FaultModel,
    c_m: &'a DMatrix<f64>,
    c_h: &'a DMatrix<f64>,
    c_h_inv: DMatrix<f64>,
    gains: &'a GainSet,
    reference: &'a ReferenceParams,
    observer: Option<&'a ObserverConfig>,
    config: &'a SimConfig,
    layout: Layout,
    plant_modes: Vec<Mode>,
    obs_modes: Vec<Mode>,
}

impl<'a> ClosedLoop<'a> {
    fn eval(&self, t: f64, y: &DVector<f64>) -> Result<Eval> {
        let l = &self.layout;
        let (n, q) = (l.n, l.q);
        let model = self.model;
        let c_p = model.c_p();
        let x1 = l.x1(y);
        let x2 = l.x2(y);
        let x3 = l.x3(y);
        let xh1 = l.obs_block(y, 0).map(|v| v.map(|s| s.max(0.0)));
        let xh2 = l.obs_block(y, 1);
        let xh3 = l.obs_block(y, 2);
        let (cx1, cx3) = match (&xh1, &xh3) {
            (Some(a), Some(b)) => (a, b),
            _ => (&x1, &x3),
        };
        let rs = self.reference.eval(t);
        let r3 = DVector::from_element(n, rs.r_dot);
        let r3_dot = DVector::from_element(n, rs.r_ddot);
        let xi = l.xi.map(|o| y.rows(o, q).into_owned());
        let mode = self.config.mode;
        // sign(x3) of the controlled copy follows its friction modes, so a
        // sub-tolerance drift of x3 never flips the integral term.
        let ctrl_modes = if l.obs.is_some() { &self.obs_modes } else { &self.plant_modes };
        let signs = DVector::from_fn(n, |i, _| match ctrl_modes[i] {
            Mode::Slip(d) => d.sign(),
            Mode::Stick => match self.gains.stuck_sign {
                StuckSign::Zero => 0.0,
                StuckSign::Reference => {
                    if r3[i] > 0.0 {
                        1.0
                    } else if r3[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            },
        });

        let p = match mode {
            ControlMode::OpenLoop => DVector::from_element(q, self.config.open_loop_ramp * t),
            ControlMode::Stabilize => stabilizing_pressure(cx1, cx3, self.gains, c_p)?,
            ControlMode::Track => tracking_pressure_signed(cx1, cx3, xi.as_ref().unwrap(), &r3, &signs, self.gains, c_p)?,
            _ => y.rows(l.p.unwrap(), q).into_owned(),
        };

        let pf = plant_forces(&x1, &x2, &x3, &p, &self.plant_modes, model)?;
        let acc = model.accelerations(&(&pf.elastic - &pf.friction), &self.plant_modes);
        let y_m = (self.c_m * &x3)[0];

        let mut dy = DVector::zeros(l.dim);
        dy.rows_mut(0, n).copy_from(&x3.abs());
        dy.rows_mut(n, n).copy_from(&x3);
        dy.rows_mut(2 * n, n).copy_from(&acc);

        let mut obs_load = None;
        let mut obs_margin = None;
        let mut obs_nominal_acc = None;
        if let (Some(obs), Some(cfg)) = (l.obs, self.observer) {
            let (xh1, xh2, xh3) = (xh1.as_ref().unwrap(), xh2.as_ref().unwrap(), xh3.as_ref().unwrap());
            let e = cfg.innovation(y_m, xh3);
            let inj = injection_force(cfg, e);
            let nom = &cfg.nominal;
            let of = crate::model::plant_forces_with(xh1, xh2, xh3, &p, &self.obs_modes, nom, Some(&inj))?;
            let acc_h = nom.accelerations(&(&of.elastic - &of.friction), &self.obs_modes);
            // Nominal acceleration without output injection, used by the compensator.
            let inj_acc = nom.accelerations(&inj, &self.obs_modes);
            obs_nominal_acc = Some(&acc_h - inj_acc);
            dy.rows_mut(obs, n).copy_from(&xh3.abs());
            dy.rows_mut(obs + n, n).copy_from(&(xh3 + &cfg.l1 * (cfg.lambda1() * e)));
            dy.rows_mut(obs + 2 * n, n).copy_from(&acc_h);
            obs_load = Some(of.load);
            obs_margin = Some(of.margin);
        }

        let mut p_inf = p.clone();
        let mut p_bar = None;
        if let Some(o) = l.xi {
            dy.rows_mut(o, q).copy_from(&(self.gains.output_matrix()? * (&r3 - cx3)));
        }
        if let Some(o) = l.p {
            let x3_dot = obs_nominal_acc.unwrap_or(acc);
            let inp = CompensationInputs {
                x1: cx1,
                x3: cx3,
                x3_dot: &x3_dot,
                xi: xi.as_ref().unwrap(),
                r3: &r3,
                r3_dot: &r3_dot,
                signs: Some(&signs),
            };
            p_inf = compensated_well_pressure(&inp, self.gains, c_p, &self.c_h_inv)?;
            dy.rows_mut(o, q).copy_from(&(self.c_h * (&p_inf - &p)));
            p_bar = Some(tracking_pressure_signed(cx1, cx3, xi.as_ref().unwrap(), &r3, &signs, self.gains, c_p)?);
        }

        Ok(Eval {
            dy,
            p,
            p_inf,
            p_bar,
            y_m,
            plant_friction: pf.friction,
            plant_load: pf.load,
            plant_margin: pf.margin,
            obs_load,
            obs_margin,
        })
    }

    /// Event functions: plant elements first, then observer elements.
    /// Slipping: `dir * x3`; stuck: `capacity - |load|`.
    fn event_values(&self, t: f64, y: &DVector<f64>) -> Result<Vec<f64>> {
        let ev = self.eval(t, y)?;
        let l = &self.layout;
        let x3 = l.x3(y);
        let mut g: Vec<f64> = (0..l.n)
            .map(|i| match self.plant_modes[i] {
                Mode::Slip(d) => d.sign() * x3[i],
                Mode::Stick => ev.plant_margin[i],
            })
            .collect();
        if let (Some(xh3), Some(cap)) = (l.obs_block(y, 2), &ev.obs_margin) {
            g.extend((0..l.n).map(|i| match self.obs_modes[i] {
                Mode::Slip(d) => d.sign() * xh3[i],
                Mode::Stick => cap[i],
            }));
        }
        Ok(g)
    }

    /// Crossings count once `g` passes `-tol`, so noise below the
    /// tolerance does not flip modes.
    fn event_tolerance(&self, k: usize) -> f64 {
        let n = self.layout.n;
        let mode = if k < n { self.plant_modes[k] } else { self.obs_modes[k - n] };
        if mode.is_stuck() { self.config.event_force_tol } else { self.config.event_tol }
    }
}

impl OdeSystem for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(t, y)?.dy)
    }

    fn frozen(&self) -> Vec<bool> {
        let l = &self.layout;
        let mut f = vec![false; l.dim];
        for i in 0..l.n {
            if self.plant_modes[i].is_stuck() {
                f[2 * l.n + i] = true;
            }
        }
        if let Some(o) = l.obs {
            for i in 0..l.n {
                if self.obs_modes[i].is_stuck() {
                    f[o + 2 * l.n + i] = true;
                }
            }
        }
        f
    }

    fn typical(&self) -> DVector<f64> {
        let l = &self.layout;
        let mut v = DVector::from_element(l.dim, 1e-2);
        v.rows_mut(2 * l.n, l.n).fill(1e-4);
        if let Some(o) = l.obs {
            v.rows_mut(o + 2 * l.n, l.n).fill(1e-4);
        }
        if let Some(o) = l.p {
            v.rows_mut(o, l.q).fill(1e-2);
        }
        v
    }
}

/// Validated bundle of everything a run needs.
pub struct RunSetup<'a> {
    pub scenario: &'a Scenario,
    pub gains: &'a GainSet,
    pub reference: &'a ReferenceParams,
    pub observer: Option<&'a ObserverConfig>,
    pub config: &'a SimConfig,
}

fn tolerances(layout: &Layout, cfg: &SimConfig) -> Tolerances {
    let n = layout.n;
    let mut atol = DVector::from_element(layout.dim, cfg.atol_slip);
    atol.rows_mut(2 * n, n).fill(cfg.atol_rate);
    if let Some(o) = layout.xi {
        atol.rows_mut(o, layout.q).fill(cfg.atol_integral);
    }
    if let Some(o) = layout.p {
        atol.rows_mut(o, layout.q).fill(cfg.atol_pressure);
    }
    if let Some(o) = layout.obs {
        atol.rows_mut(o + 2 * n, n).fill(cfg.atol_rate);
    }
    Tolerances { rtol: cfg.rtol, atol }
}

/// Trapezoid vs. three-point quadrature weights on nodes `0, gamma, 1`.
fn quadratic_weights() -> [f64; 3] {
    let g = GAMMA;
    [(3.0 * g - 1.0) / (6.0 * g), 1.0 / (6.0 * g * (1.0 - g)), (2.0 - 3.0 * g) / (6.0 * (1.0 - g))]
}

struct Online {
    tail_start: f64,
    tail_span: f64,
    acc: [f64; 5],
    prev: Option<(f64, [f64; 5])>,
}

impl Online {
    fn push(&mut self, t: f64, vals: [f64; 5]) {
        if let Some((tp, vp)) = self.prev {
            if t > self.tail_start {
                let lo = tp.max(self.tail_start);
                let w = (lo - tp) / (t - tp).max(f64::MIN_POSITIVE);
                for k in 0..5 {
                    let v_lo = vp[k] + w * (vals[k] - vp[k]);
                    self.acc[k] += 0.5 * (t - lo) * (v_lo + vals[k]);
                }
                self.tail_span += t - lo;
            }
        }
        self.prev = Some((t, vals));
    }

    fn result(&self) -> TailMetrics {
        let d = self.tail_span.max(f64::MIN_POSITIVE);
        let v = |k: usize| if self.tail_span > 0.0 { self.acc[k] / d } else { self.prev.map_or(0.0, |p| p.1[k]) };
        TailMetrics { e: v(0), et: v(1), ep: v(2), estimation_error: v(3), rate_estimation_error: v(4) }
    }
}

/// Integrates the configured closed loop from the shifted origin.
pub fn run(setup: &RunSetup<'_>) -> std::result::Result<Trajectory, RunFailure> {
    let cfg = setup.config;
    cfg.validate()?;
    let model = &setup.scenario.fault;
    let (n, q) = (model.n(), model.q());
    let report = validate_gains(setup.gains);
    if cfg.mode != ControlMode::OpenLoop && !report.passed {
        return Err(Error::Config(format!(
            "gain condition violated: need lambda_delta > {} and lambda_v > {}",
            report.delta_threshold, report.v_threshold
        ))
        .into());
    }
    let gains_owned;
    let gains = if setup.gains.c_t.is_none() {
        gains_owned = setup.gains.clone().with_output_matrix(model.c_p())?;
        &gains_owned
    } else {
        setup.gains
    };
    if cfg.mode.has_integral() {
        setup.reference.validate()?;
    }
    if cfg.mode.has_observer() {
        let obs = setup
            .observer
            .ok_or_else(|| Error::Config("observer configuration required for this mode".into()))?;
        if !hurwitz_check(obs).passed {
            return Err(Error::Config("observer gains do not give a Hurwitz error matrix".into()).into());
        }
    }
    let c_h_inv = if cfg.mode.has_actuator() { actuator_inverse(&setup.scenario.c_h)? } else { DMatrix::zeros(0, 0) };
    let layout = Layout::new(n, q, cfg.mode);

    let mut sys = ClosedLoop {
        model,
        c_m: &setup.scenario.c_m,
        c_h: &setup.scenario.c_h,
        c_h_inv,
        gains,
        reference: setup.reference,
        observer: if cfg.mode.has_observer() { setup.observer } else { None },
        config: cfg,
        layout,
        plant_modes: vec![Mode::Slip(Direction::Forward); n],
        obs_modes: vec![Mode::Slip(Direction::Forward); n],
    };

    let v0 = cfg.initial_rate();
    let mut y = DVector::zeros(layout.dim);
    y.rows_mut(2 * n, n).fill(v0);
    let mut engine = Engine::new(&sys, cfg, layout);
    engine.initial_modes(&mut sys, &y)?;
    match engine.integrate(&mut sys, y) {
        Ok(()) => Ok(engine.finish(&sys, v0)),
        Err(error) => Err(RunFailure { error, partial: Some(Box::new(engine.finish(&sys, v0))) }),
    }
}

struct Engine {
    stepper: Trbdf2,
    layout: Layout,
    t_end: f64,
    samples: Vec<Sample>,
    events: Vec<EventRecord>,
    residuals: Vec<f64>,
    res_tols: Vec<f64>,
    vs: Vec<f64>,
    stats: RunStats,
    online: Online,
    rate_history: Vec<(f64, f64)>,
    max_stuck_rate: f64,
    max_pressure_jump: f64,
    /// Fault pressure at the located event time, before any mode switch.
    pre_switch_p: Option<DVector<f64>>,
    pending_res: (f64, f64),
    last_record: (f64, f64),
    record_interval: f64,
    record_decades: f64,
    t: f64,
}

impl Engine {
    fn new(sys: &ClosedLoop<'_>, cfg: &SimConfig, layout: Layout) -> Self {
        let tol = tolerances(&layout, cfg);
        let stepper = Trbdf2::new(tol, NewtonSettings { tol: cfg.newton_tol, max_iter: cfg.newton_max_iter });
        let _ = sys;
        Self {
            stepper,
            layout,
            t_end: cfg.t_end,
            samples: Vec::new(),
            events: Vec::new(),
            residuals: Vec::new(),
            res_tols: Vec::new(),
            vs: Vec::new(),
            stats: RunStats::default(),
            online: Online { tail_start: 0.95 * cfg.t_end, tail_span: 0.0, acc: [0.0; 5], prev: None },
            rate_history: Vec::new(),
            max_stuck_rate: 0.0,
            max_pressure_jump: 0.0,
            pre_switch_p: None,
            pending_res: (0.0, 0.0),
            last_record: (f64::NEG_INFINITY, f64::NAN),
            record_interval: cfg.record_interval.unwrap_or(cfg.t_end / 1000.0),
            record_decades: cfg.record_decades,
            t: 0.0,
        }
    }

    fn initial_modes(&mut self, sys: &mut ClosedLoop<'_>, y: &DVector<f64>) -> Result<()> {
        let l = self.layout;
        let ev = sys.eval(0.0, y)?;
        let x3 = l.x3(y);
        for i in 0..l.n {
            sys.plant_modes[i] = match Direction::of(x3[i]) {
                Some(d) => Mode::Slip(d),
                None => classify_rest(ev.plant_load[i], ev.plant_margin[i]),
            };
        }
        if let (Some(xh3), Some(load), Some(cap)) = (l.obs_block(y, 2), &ev.obs_load, &ev.obs_margin) {
            for i in 0..l.n {
                sys.obs_modes[i] = match Direction::of(xh3[i]) {
                    Some(d) => Mode::Slip(d),
                    None => classify_rest(load[i], cap[i]),
                };
            }
        }
        Ok(())
    }

    fn peak_rate(&self, y: &DVector<f64>) -> f64 {
        self.layout.x3(y).amax()
    }

    fn record(&mut self, sys: &ClosedLoop<'_>, t: f64, y: &DVector<f64>, ev: &Eval, force: bool) {
        let l = self.layout;
        let peak = self.peak_rate(y);
        let lr = peak.max(1e-30).log10();
        let due = force
            || t - self.last_record.0 >= self.record_interval
            || !(self.last_record.1 - lr).abs().le(&self.record_decades);
        let x1 = l.x1(y);
        let x2 = l.x2(y);
        let x3 = l.x3(y);
        let rs = sys.reference.eval(t);
        let r3 = DVector::from_element(l.n, rs.r_dot);
        let c_t = sys.gains.output_matrix().expect("attached in run");
        let et = (c_t * (&r3 - &x3)).norm();
        let ep = ev.p_bar.as_ref().map_or(0.0, |pb| (&ev.p - pb).norm());
        let (est_err, rate_err) = match l.obs {
            Some(o) => {
                let xh = y.rows(o, 3 * l.n);
                let x = y.rows(0, 3 * l.n);
                let d = x - xh;
                (d.norm(), d.rows(2 * l.n, l.n).norm())
            }
            None => (0.0, 0.0),
        };
        self.online.push(t, [x3.norm(), et, ep, est_err, rate_err]);
        if !due {
            return;
        }
        let (res, tol) = std::mem::take(&mut self.pending_res);
        self.samples.push(Sample {
            t,
            x1: x1.clone(),
            x2: x2.clone(),
            x3: x3.clone(),
            x3_hat: l.obs_block(y, 2),
            xi: l.xi.map(|o| y.rows(o, l.q).into_owned()),
            p: ev.p.clone(),
            p_inf: ev.p_inf.clone(),
            y_m: ev.y_m,
            v: storage_v(&x1, &x2, &x3, sys.model),
            residual: res,
            residual_tol: tol,
            metric_e: x3.norm(),
            metric_et: et,
            metric_ep: ep,
            estimation_error: est_err,
            stuck: sys.plant_modes.iter().filter(|m| m.is_stuck()).count(),
        });
        self.last_record = (t, lr);
    }

    /// Energy-balance residual of one accepted step and its tolerance.
    fn monitor_step(&mut self, sys: &ClosedLoop<'_>, t: f64, h: f64, y0: &DVector<f64>, ev0: &Eval, s: &StepOk, ev1: &Eval) -> Result<()> {
        let l = self.layout;
        let m = sys.model;
        let rate = |y: &DVector<f64>, fr: &DVector<f64>| {
            crate::passivity::storage_rate(&l.x1(y), &l.x3(y), fr, m)
        };
        let evg = sys.eval(t + GAMMA * h, &s.y_gamma)?;
        let r0 = rate(y0, &ev0.plant_friction);
        let rg = rate(&s.y_gamma, &evg.plant_friction);
        let r1 = rate(&s.y, &ev1.plant_friction);
        let v0 = storage_v(&l.x1(y0), &l.x2(y0), &l.x3(y0), m);
        let v1 = storage_v(&l.x1(&s.y), &l.x2(&s.y), &l.x3(&s.y), m);
        let trap = 0.5 * h * (r0 + r1);
        let w = quadratic_weights();
        let quad = h * (w[0] * r0 + w[1] * rg + w[2] * r1);
        let residual = v1 - v0 - trap;
        // Quadrature error plus the energy carried by a tolerance-sized state error.
        let x1 = l.x1(&s.y);
        let kx2 = m.stiffness() * l.x2(&s.y);
        let mx3 = m.mass() * l.x3(&s.y);
        let wt = self.stepper.tol.weight(&s.y);
        let mut state_term = 0.0;
        for i in 0..l.n {
            state_term += x1[i].abs() * wt[i] + kx2[i].abs() * wt[l.n + i] + mx3[i].abs() * wt[2 * l.n + i];
        }
        let tol = (trap - quad).abs() + state_term + 1e-15 * v1.abs().max(v0.abs());
        self.residuals.push(residual);
        self.res_tols.push(tol);
        self.vs.push(v1);
        self.pending_res.0 += residual;
        self.pending_res.1 += tol;
        Ok(())
    }

    fn step_cap(&self, sys: &ClosedLoop<'_>, y: &DVector<f64>) -> f64 {
        let peak = self.peak_rate(y);
        let mut cap = sys.config.dt_max;
        if peak > 0.0 {
            cap = cap.min(sys.config.max_slip_per_step / peak);
        }
        cap.max(sys.config.dt_min)
    }

    fn integrate(&mut self, sys: &mut ClosedLoop<'_>, mut y: DVector<f64>) -> Result<()> {
        let cfg = sys.config;
        let mut t = 0.0;
        let mut ev = sys.eval(t, &y)?;
        let mut f = ev.dy.clone();
        let mut g = sys.event_values(t, &y)?;
        let mut h = cfg.dt_init;
        let mut jac_age = 0usize;
        let mut zero_length = 0usize;
        if self.settle(sys, t, &y)? {
            ev = sys.eval(t, &y)?;
            f = ev.dy.clone();
            g = sys.event_values(t, &y)?;
        }
        self.vs.push(storage_v(&self.layout.x1(&y), &self.layout.x2(&y), &self.layout.x3(&y), sys.model));
        self.record(sys, t, &y, &ev, true);
        self.rate_history.push((t, self.peak_rate(&y)));

        while t < self.t_end {
            if self.stats.steps >= cfg.max_steps {
                return Err(Error::Integration { t, reason: format!("step limit {} reached", cfg.max_steps) });
            }
            let remaining = self.t_end - t;
            let cap = self.step_cap(sys, &y);
            let mut hs = h.min(cap);
            if hs >= remaining || remaining - hs < cfg.dt_min {
                hs = remaining;
            }
            if jac_age >= cfg.jacobian_max_age {
                self.stepper.invalidate();
                jac_age = 0;
            }
            let out = self.stepper.step(sys, t, &y, &f, hs)?;
            let s = match out {
                StepOutcome::NewtonFailed => {
                    self.stats.newton_failures += 1;
                    if !self.stepper.jac_fresh {
                        self.stepper.invalidate();
                        jac_age = 0;
                    } else {
                        h = hs * 0.25;
                    }
                    if h < cfg.dt_min {
                        return Err(Error::Integration { t, reason: "Newton iteration failed at the minimum step".into() });
                    }
                    continue;
                }
                StepOutcome::Done(s) => s,
            };
            if !(s.err <= 1.0) {
                self.stats.rejected += 1;
                let fac = if s.err.is_finite() { (0.9 * s.err.powf(-1.0 / 3.0)).clamp(0.2, 0.9) } else { 0.25 };
                h = hs * fac;
                if h < cfg.dt_min {
                    return Err(Error::Integration {
                        t,
                        reason: format!("step size fell below dt_min = {:e} (error estimate {:.3e})", cfg.dt_min, s.err),
                    });
                }
                continue;
            }
            self.stepper.jac_fresh = false;
            jac_age += 1;

            // Event detection on the accepted step.
            let g1 = sys.event_values(t + hs, &s.y)?;
            let crossed: Vec<usize> = (0..g.len())
                .filter(|&k| {
                    let tol = sys.event_tolerance(k);
                    g1[k] < -tol
                })
                .collect();
            if !crossed.is_empty() {
                if let Some((t_new, y_new)) = self.handle_events(sys, t, hs, &y, &f, &s, &g, &g1, &crossed)? {
                    self.settle(sys, t_new, &y_new)?;
                    zero_length = if t_new == t { zero_length + 1 } else { 0 };
                    if zero_length > 4 * self.layout.n + 10 {
                        return Err(Error::Integration { t, reason: "friction modes switch back and forth without time advancing".into() });
                    }
                    let ev_new = sys.eval(t_new, &y_new)?;
                    if let Some(before) = self.pre_switch_p.take() {
                        self.max_pressure_jump = self.max_pressure_jump.max((&ev_new.p - before).amax());
                    }
                    t = t_new;
                    y = y_new;
                    ev = ev_new;
                    f = ev.dy.clone();
                    g = sys.event_values(t, &y)?;
                    self.stepper.invalidate();
                    jac_age = 0;
                    self.rate_history.push((t, self.peak_rate(&y)));
                    self.record(sys, t, &y, &ev, true);
                    continue;
                }
            }

            // Plain acceptance.
            let mut y1 = s.y.clone();
            let l = self.layout;
            for i in 0..l.n {
                y1[i] = y1[i].max(y[i]);
            }
            let ev1 = sys.eval(t + hs, &y1)?;
            self.monitor_step(sys, t, hs, &y, &ev, &s, &ev1)?;
            self.stats.steps += 1;
            for i in 0..l.n {
                if sys.plant_modes[i].is_stuck() {
                    self.max_stuck_rate = self.max_stuck_rate.max(y1[2 * l.n + i].abs());
                }
            }
            t += hs;
            if self.t_end - t < cfg.dt_min {
                t = self.t_end;
            }
            y = y1;
            f = ev1.dy.clone();
            ev = ev1;
            g = g1;
            self.rate_history.push((t, self.peak_rate(&y)));
            let last = t >= self.t_end;
            self.record(sys, t, &y, &ev, last);
            let fac = (0.9 * s.err.max(1e-10).powf(-1.0 / 3.0)).clamp(0.2, 5.0);
            if fac >= 1.25 || fac < 1.0 || hs < h {
                h = (hs * fac).min(cfg.dt_max);
                if hs < h / fac {
                    // The step was clipped by the cap or the end time; keep the nominal size.
                    h = h.max(hs);
                }
            }
        }
        self.t = t;
        Ok(())
    }

    /// Releases stuck elements whose load already exceeds the capacity at `t`.
    /// Pinning a slip-rate moves an algebraic pressure, which can put a
    /// freshly stuck element past its threshold without any crossing.
    fn settle(&mut self, sys: &mut ClosedLoop<'_>, t: f64, y: &DVector<f64>) -> Result<bool> {
        let n = self.layout.n;
        let mut changed = false;
        for _ in 0..=2 * n {
            let ev = sys.eval(t, y)?;
            let g = sys.event_values(t, y)?;
            let tols: Vec<f64> = (0..g.len()).map(|k| sys.event_tolerance(k)).collect();
            let mut any = false;
            for (k, &gk) in g.iter().enumerate() {
                let observer = k >= n;
                let i = k % n;
                let (modes, load) = if observer {
                    (&mut sys.obs_modes, ev.obs_load.as_ref().unwrap())
                } else {
                    (&mut sys.plant_modes, &ev.plant_load)
                };
                if modes[i].is_stuck() && gk < -tols[k] {
                    let dir = if load[i] >= 0.0 { Direction::Forward } else { Direction::Backward };
                    modes[i] = Mode::Slip(dir);
                    self.events.push(EventRecord { t, element: i, transition: Transition::StickToSlip, observer });
                    self.stats.events += 1;
                    any = true;
                }
            }
            if !any {
                break;
            }
            changed = true;
        }
        Ok(changed)
    }

    /// Locates the earliest crossing, re-steps to it and switches modes.
    /// Returns the post-event time and state, or `None` when no mode changes
    /// (the step is then accepted as is by the caller).
    #[allow(clippy::too_many_arguments)]
    fn handle_events(
        &mut self,
        sys: &mut ClosedLoop<'_>,
        t: f64,
        h: f64,
        y: &DVector<f64>,
        f: &DVector<f64>,
        s: &StepOk,
        g0: &[f64],
        g1: &[f64],
        crossed: &[usize],
    ) -> Result<Option<(f64, DVector<f64>)>> {
        let cfg = sys.config;
        let dense = Hermite { t0: t, h, y0: y, f0: f, y1: &s.y, f1: &s.f };
        let mut first = (f64::INFINITY, usize::MAX);
        for &k in crossed {
            let theta = if g0[k] <= 0.0 {
                0.0
            } else {
                let gk = |th: f64| {
                    let yy = dense.at(th);
                    sys.event_values(t + th * h, &yy).map(|v| v[k]).unwrap_or(f64::NAN)
                };
                illinois(gk, 0.0, g0[k], 1.0, g1[k], 1e-13, 0.1 * sys.event_tolerance(k))
            };
            if theta < first.0 {
                first = (theta, k);
            }
        }
        let (mut theta, k) = first;

        // Re-step to the located time; refine with actual steps while the
        // target event function is outside tolerance.
        let tol_k = sys.event_tolerance(k);
        let mut lo = (0.0, g0[k]);
        let mut hi = (1.0, g1[k]);
        let mut ys = y.clone();
        let mut monitored: Option<(StepOk, f64)> = None;
        for iter in 0..6 {
            if theta <= 0.0 {
                ys = y.clone();
                monitored = None;
                break;
            }
            let hh = theta * h;
            let StepOutcome::Done(st) = self.stepper.step(sys, t, y, f, hh)? else {
                theta *= 0.5;
                continue;
            };
            let gs = sys.event_values(t + hh, &st.y)?[k];
            ys = st.y.clone();
            monitored = Some((st, hh));
            if gs.abs() <= tol_k {
                break;
            }
            if gs > 0.0 {
                lo = (theta, gs);
            } else {
                hi = (theta, gs);
            }
            if iter == 5 {
                self.stats.event_refinement_misses += 1;
                break;
            }
            let next = (lo.0 * hi.1 - hi.0 * lo.1) / (hi.1 - lo.1);
            theta = if next.is_finite() && next > lo.0 && next < hi.0 { next } else { 0.5 * (lo.0 + hi.0) };
        }
        let t_ev = t + theta.max(0.0) * h;
        for i in 0..self.layout.n {
            ys[i] = ys[i].max(y[i]);
        }

        // Every event function within tolerance switches at this time.
        let gs = sys.event_values(t_ev, &ys)?;
        let mut switched = false;
        let ev_s = sys.eval(t_ev, &ys)?;
        self.pre_switch_p = Some(ev_s.p.clone());
        let l = self.layout;
        let mut order: Vec<usize> = (0..gs.len()).filter(|&j| j == k || gs[j] <= sys.event_tolerance(j)).collect();
        order.sort_by(|a, b| gs[*a].partial_cmp(&gs[*b]).unwrap_or(std::cmp::Ordering::Equal));
        for j in order {
            let observer = j >= l.n;
            let i = j % l.n;
            let (modes, load, cap, x3_idx) = if observer {
                (&mut sys.obs_modes, ev_s.obs_load.as_ref().unwrap(), ev_s.obs_margin.as_ref().unwrap(), l.obs.unwrap() + 2 * l.n + i)
            } else {
                (&mut sys.plant_modes, &ev_s.plant_load, &ev_s.plant_margin, 2 * l.n + i)
            };
            let old = modes[i];
            let new = match old {
                Mode::Slip(_) => classify_rest(load[i], cap[i]),
                // Only the located crossing is released from within the band.
                Mode::Stick => match classify_rest(load[i], cap[i]) {
                    Mode::Stick if j == k => Mode::Slip(if load[i] >= 0.0 { Direction::Forward } else { Direction::Backward }),
                    m => m,
                },
            };
            if new == old {
                // Slipping on from rest: drop the sub-tolerance reverse drift.
                if matches!(old, Mode::Slip(_)) && ys[x3_idx] != 0.0 && gs[j] <= 0.0 {
                    ys[x3_idx] = 0.0;
                    switched = true;
                }
                continue;
            }
            if matches!(old, Mode::Slip(_)) {
                if ys[x3_idx].abs() > 10.0 * cfg.event_tol.max(cfg.stick_velocity_floor) && theta > 0.0 {
                    self.stats.event_refinement_misses += 1;
                }
                ys[x3_idx] = 0.0;
            }
            modes[i] = new;
            switched = true;
            let transition = match (old, new) {
                (Mode::Stick, _) => Transition::StickToSlip,
                (_, Mode::Stick) => Transition::SlipToStick,
                _ => Transition::Reversal,
            };
            self.events.push(EventRecord { t: t_ev, element: i, transition, observer });
            self.stats.events += 1;
        }
        if !switched {
            return Ok(None);
        }
        if let Some((st, hh)) = monitored {
            let ev_y = sys.eval(t, y)?;
            let ev1 = sys.eval(t + hh, &st.y)?;
            self.monitor_step(sys, t, hh, y, &ev_y, &st, &ev1)?;
            self.stats.steps += 1;
        }
        Ok(Some((t_ev, ys)))
    }

    fn finish(&mut self, sys: &ClosedLoop<'_>, v0: f64) -> Trajectory {
        let st = &self.stepper.stats;
        self.stats.jacobians = st.jacobians;
        self.stats.factorizations = st.factorizations;
        self.stats.rhs_evals = st.rhs_evals;
        let (mut peak, mut peak_t) = (0.0, 0.0);
        for &(t, r) in &self.rate_history {
            if r > peak {
                peak = r;
                peak_t = t;
            }
        }
        let fast_phase = (peak > 0.0).then(|| {
            let thr = 1e-3 * peak;
            let first = self.rate_history.iter().find(|p| p.1 > thr).map_or(0.0, |p| p.0);
            let last = self.rate_history.iter().rev().find(|p| p.1 > thr).map_or(0.0, |p| p.0);
            (first, last)
        });
        Trajectory {
            n: self.layout.n,
            q: self.layout.q,
            mode: sys.config.mode,
            samples: std::mem::take(&mut self.samples),
            events: std::mem::take(&mut self.events),
            monitor: monitor_report(&self.residuals, &self.res_tols, &self.vs),
            stats: self.stats.clone(),
            tail: self.online.result(),
            peak_slip_rate: peak,
            peak_slip_rate_time: peak_t,
            fast_phase,
            max_stuck_rate: self.max_stuck_rate,
            max_pressure_jump: self.max_pressure_jump,
            initial_slip_rate: v0,
        }
    }
}
