//! C interface to `quakectl`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns a
//! [`QkStatus`]; the message of the last failure on the calling thread is
//! available from [`qk_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use quakectl::cli::{self, ValidatedRun};
use quakectl::control::{validate_gains, GainSet, ReferenceParams};
use quakectl::sim::{run, RunSetup, Trajectory};
use quakectl::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Configuration or gain validation failed.
    Config = 3,
    /// The integrator stopped early; a partial trajectory may still be returned.
    Integration = 4,
    Io = 5,
    /// Invalid model data: dimensions, definiteness or rank.
    Model = 6,
    OutOfRange = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Validated run configuration.
pub struct QkConfig(ValidatedRun);

/// Sampled trajectory of a finished (or aborted) run.
pub struct QkTrajectory(Trajectory);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(message: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(message.bytes().filter(|&b| b != 0));
    });
}

fn fail(status: QkStatus, message: &str) -> QkStatus {
    set_error(message);
    status
}

fn status_of(err: &Error) -> QkStatus {
    match err {
        Error::Config(_) => QkStatus::Config,
        Error::Integration { .. } => QkStatus::Integration,
        Error::Io { .. } => QkStatus::Io,
        Error::NegativeSlip(_)
        | Error::Shape { .. }
        | Error::BranchViolation(_)
        | Error::InvalidModel(_)
        | Error::Singular(_) => QkStatus::Model,
    }
}

fn from_error(err: &Error) -> QkStatus {
    fail(status_of(err), &err.to_string())
}

fn guard(f: impl FnOnce() -> QkStatus) -> QkStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(QkStatus::Internal, "panic inside quakectl"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, QkStatus> {
    if p.is_null() {
        return Err(fail(QkStatus::NullPointer, &format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(QkStatus::InvalidUtf8, &format!("{name} is not valid UTF-8")))
}

macro_rules! check_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(QkStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Copies the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qk_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Static, NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn qk_status_name(status: QkStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        QkStatus::Ok => b"ok\0",
        QkStatus::NullPointer => b"null pointer\0",
        QkStatus::InvalidUtf8 => b"invalid utf-8\0",
        QkStatus::Config => b"invalid configuration\0",
        QkStatus::Integration => b"integration failed\0",
        QkStatus::Io => b"i/o error\0",
        QkStatus::Model => b"invalid model\0",
        QkStatus::OutOfRange => b"index out of range\0",
        QkStatus::Internal => b"internal error\0",
    };
    s.as_ptr().cast()
}

/// Reads and validates a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qk_config_load(path: *const c_char, out: *mut *mut QkConfig) -> QkStatus {
    check_null!(out);
    *out = ptr::null_mut();
    guard(|| {
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match cli::parse_config(Path::new(path)) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(QkConfig(v)));
                QkStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Parses and validates configuration text. Relative CSV paths resolve
/// against `base_dir`, which may be null.
///
/// # Safety
/// `text` must be a NUL-terminated string, `base_dir` null or one, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qk_config_parse(text: *const c_char, base_dir: *const c_char, out: *mut *mut QkConfig) -> QkStatus {
    check_null!(out);
    *out = ptr::null_mut();
    guard(|| {
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let base = if base_dir.is_null() {
            None
        } else {
            match str_arg(base_dir, "base_dir") {
                Ok(b) => Some(Path::new(b)),
                Err(s) => return s,
            }
        };
        match cli::parse_manifest_str(text, &[]).and_then(|m| cli::validate_manifest(m, base)) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(QkConfig(v)));
                QkStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `config` must be null or a handle from `qk_config_load`/`qk_config_parse`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn qk_config_free(config: *mut QkConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Number of fault elements `n` and wells `q`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qk_config_dims(config: *const QkConfig, n: *mut usize, q: *mut usize) -> QkStatus {
    check_null!(config, n, q);
    let fault = &(*config).0.scenario.fault;
    *n = fault.n();
    *q = fault.q();
    QkStatus::Ok
}

/// Runs the configuration. On `QkStatus::Integration` the trajectory up to
/// the failure is still returned in `out` when available.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qk_run(config: *const QkConfig, out: *mut *mut QkTrajectory) -> QkStatus {
    check_null!(config, out);
    *out = ptr::null_mut();
    guard(|| {
        let v = &(*config).0;
        let setup = RunSetup {
            scenario: &v.scenario,
            gains: &v.gains,
            reference: &v.manifest.reference,
            observer: v.observer.as_ref(),
            config: &v.manifest.sim,
        };
        match run(&setup) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(QkTrajectory(t)));
                QkStatus::Ok
            }
            Err(f) => {
                if let Some(p) = f.partial {
                    *out = Box::into_raw(Box::new(QkTrajectory(*p)));
                }
                from_error(&f.error)
            }
        }
    })
}

/// Runs the configuration and writes the CLI output files into `out_dir`.
/// `exit_code` receives the command-line exit code (0, 3 or 4).
///
/// # Safety
/// `config` must be a live handle, `out_dir` a NUL-terminated string and
/// `exit_code` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qk_run_export(config: *const QkConfig, out_dir: *const c_char, exit_code: *mut i32) -> QkStatus {
    check_null!(config, exit_code);
    guard(|| {
        let dir = match str_arg(out_dir, "out_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match cli::run_and_export(&(*config).0, Path::new(dir)) {
            Ok(o) => {
                *exit_code = o.exit_code;
                QkStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `traj` must be null or a handle from `qk_run` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn qk_trajectory_free(traj: *mut QkTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of recorded samples; 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qk_trajectory_len(traj: *const QkTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.samples.len())
}

/// Number of recorded mode switches (plant and observer copy).
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qk_trajectory_event_count(traj: *const QkTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.events.len())
}

/// Summary figures of a trajectory. Any output pointer may be null.
///
/// # Safety
/// `traj` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn qk_trajectory_summary(
    traj: *const QkTrajectory,
    t_final: *mut f64,
    final_mean_slip: *mut f64,
    peak_slip_rate: *mut f64,
    monitor_passed: *mut bool,
) -> QkStatus {
    check_null!(traj);
    let t = &(*traj).0;
    if let Some(p) = t_final.as_mut() {
        *p = t.last().map_or(0.0, |s| s.t);
    }
    if let Some(p) = final_mean_slip.as_mut() {
        *p = t.final_mean_slip();
    }
    if let Some(p) = peak_slip_rate.as_mut() {
        *p = t.peak_slip_rate;
    }
    if let Some(p) = monitor_passed.as_mut() {
        *p = t.monitor.passed;
    }
    QkStatus::Ok
}

/// Copies sample `index`: its time into `t` and the slip, displacement and
/// slip-rate vectors (`n` values each, any may be null) into the buffers.
///
/// # Safety
/// `traj` and `t` must be valid; non-null buffers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn qk_trajectory_sample(
    traj: *const QkTrajectory,
    index: usize,
    n: usize,
    t: *mut f64,
    x1: *mut f64,
    x2: *mut f64,
    x3: *mut f64,
) -> QkStatus {
    check_null!(traj, t);
    let tr = &(*traj).0;
    let Some(s) = tr.samples.get(index) else {
        return fail(QkStatus::OutOfRange, &format!("sample {index} of {}", tr.samples.len()));
    };
    if n != tr.n {
        return fail(QkStatus::OutOfRange, &format!("buffers hold {n} values, trajectory has n = {}", tr.n));
    }
    *t = s.t;
    for (dst, src) in [(x1, &s.x1), (x2, &s.x2), (x3, &s.x3)] {
        if !dst.is_null() {
            ptr::copy_nonoverlapping(src.as_ptr(), dst, n);
        }
    }
    QkStatus::Ok
}

/// Gain condition `lambda_delta > (l_delta + 1)/mu_min`, `lambda_v > l_v/mu_min`.
/// Writes both thresholds (outputs may be null) and `passed`.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qk_validate_gains(
    lambda_delta: f64,
    lambda_v: f64,
    mu_min: f64,
    l_delta: f64,
    l_v: f64,
    delta_threshold: *mut f64,
    v_threshold: *mut f64,
    passed: *mut bool,
) -> QkStatus {
    check_null!(passed);
    let g = GainSet { lambda_delta, lambda_v, mu_min, l_delta, l_v, ..GainSet::default() };
    let r = validate_gains(&g);
    if let Some(p) = delta_threshold.as_mut() {
        *p = r.delta_threshold;
    }
    if let Some(p) = v_threshold.as_mut() {
        *p = r.v_threshold;
    }
    *passed = r.passed;
    QkStatus::Ok
}

/// Quintic slip reference and its rate at time `t`.
///
/// # Safety
/// `r` and `r_dot` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qk_reference(d_max: f64, t_op: f64, t: f64, r: *mut f64, r_dot: *mut f64) -> QkStatus {
    check_null!(r, r_dot);
    let p = ReferenceParams { d_max, t_op };
    if let Err(e) = p.validate() {
        return from_error(&e);
    }
    let s = p.eval(t);
    *r = s.r;
    *r_dot = s.r_dot;
    QkStatus::Ok
}
