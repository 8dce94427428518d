//! Run manifests, batch execution and file export for the command line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{validate_gains, GainSet, ReferenceParams};
use crate::error::{Error, Result};
use crate::observer::{hurwitz_check, ObserverConfig, ObserverSettings};
use crate::passivity::{sector_probe, StateBox};
use crate::scenario::{build_scenario, Scenario, ScenarioConfig};
use crate::sim::oracle::regularized_oracle_run;
use crate::sim::{run, ControlMode, RunSetup, SimConfig, TailMetrics, Trajectory};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "QUAKECTL_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INTEGRATION: i32 = 3;
pub const EXIT_MONITOR: i32 = 4;

const REQUIRED_SECTIONS: [&str; 3] = ["scenario", "gains", "sim"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Output directory; relative paths resolve against the output root.
    pub output_dir: Option<PathBuf>,
    /// Seed of the randomized sector probe reported in the summary.
    pub seed: u64,
    pub probe_samples: usize,
    /// Boundary layer of the regularized oracle [m/s].
    pub oracle_boundary_layer: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { output_dir: None, seed: 0, probe_samples: 10_000, oracle_boundary_layer: 1e-8 }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub scenario: ScenarioConfig,
    pub gains: GainSet,
    #[serde(default)]
    pub reference: ReferenceParams,
    #[serde(default)]
    pub observer: ObserverSettings,
    pub sim: SimConfig,
    #[serde(default)]
    pub run: RunSection,
}

/// A manifest whose module-level checks all passed.
#[derive(Debug, Clone)]
pub struct ValidatedRun {
    pub manifest: RunManifest,
    pub scenario: Scenario,
    /// Gains with the integral output matrix attached.
    pub gains: GainSet,
    pub observer: Option<ObserverConfig>,
}

/// Parses `key=value` into a TOML value; bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key such as `scenario.element_mass` in a parsed document.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` must look like section.field")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Parses manifest text, applying `overrides` (dotted key, raw value) first.
pub fn parse_manifest_str(text: &str, overrides: &[(String, String)]) -> Result<RunManifest> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    for (k, v) in overrides {
        set_dotted(&mut table, k, v)?;
    }
    let missing: Vec<&str> = REQUIRED_SECTIONS.iter().copied().filter(|s| !table.contains_key(*s)).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing required sections: {} (gains needs lambda_delta, lambda_v, lambda_xi, mu_min, l_delta, l_v)",
            missing.join(", ")
        )));
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))
}

/// Runs every module-level check: scenario assembly (shape, definiteness and
/// rank), reference, integrator settings, gain condition and observer
/// Hurwitz test. Relative CSV paths resolve against `base_dir`.
pub fn validate_manifest(manifest: RunManifest, base_dir: Option<&Path>) -> Result<ValidatedRun> {
    manifest.scenario.validate()?;
    manifest.reference.validate()?;
    manifest.sim.validate()?;
    let scenario = build_scenario(&manifest.scenario, base_dir)?;
    let report = validate_gains(&manifest.gains);
    if manifest.sim.mode != ControlMode::OpenLoop && !report.passed {
        return Err(Error::Config(format!(
            "gain condition violated: need lambda_delta > (l_delta + 1)/mu_min = {} (got {}) and lambda_v > l_v/mu_min = {} (got {})",
            report.delta_threshold, manifest.gains.lambda_delta, report.v_threshold, manifest.gains.lambda_v
        )));
    }
    let gains = manifest.gains.clone().with_output_matrix(scenario.fault.c_p())?;
    let observer = if manifest.sim.mode.has_observer() {
        let cfg = ObserverConfig::new(&scenario.fault, &scenario.c_m, &manifest.observer)?;
        let h = hurwitz_check(&cfg);
        if !h.passed {
            return Err(Error::Config(format!(
                "observer gains are not Hurwitz (largest real part {:e})",
                h.max_real
            )));
        }
        Some(cfg)
    } else {
        None
    };
    Ok(ValidatedRun { manifest, scenario, gains, observer })
}

/// Reads, parses and validates a manifest file.
pub fn parse_config(path: &Path) -> Result<ValidatedRun> {
    parse_config_with(path, &[])
}

pub fn parse_config_with(path: &Path, overrides: &[(String, String)]) -> Result<ValidatedRun> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })?;
    let manifest = parse_manifest_str(&text, overrides)?;
    validate_manifest(manifest, path.parent())
}

/// Output directory: explicit value, else `run.output_dir`, else the
/// config file stem; relative paths go under `$QUAKECTL_OUTPUT_ROOT`.
pub fn resolve_output_dir(explicit: Option<&Path>, manifest: &RunManifest, config_path: &Path) -> PathBuf {
    let chosen = explicit
        .map(Path::to_path_buf)
        .or_else(|| manifest.run.output_dir.clone())
        .unwrap_or_else(|| {
            let stem = config_path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            PathBuf::from("runs").join(stem)
        });
    if chosen.is_absolute() {
        return chosen;
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(chosen),
        None => chosen,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlipStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub status: &'static str,
    pub error: Option<String>,
    pub mode: ControlMode,
    pub n: usize,
    pub q: usize,
    pub t_final: f64,
    pub final_slip: SlipStats,
    pub peak_slip_rate: f64,
    pub peak_slip_rate_time: f64,
    /// Window where the peak slip-rate exceeds 1e-3 of its maximum.
    pub fast_phase: Option<(f64, f64)>,
    /// Uniform slip-rate seeded at t = 0 to select the slipping solution.
    pub initial_slip_rate: f64,
    pub reference_peak_rate: f64,
    pub tail: TailMetrics,
    pub monitor: crate::passivity::MonitorReport,
    pub sector_probe_margin: f64,
    pub stats: crate::sim::RunStats,
    pub plant_events: usize,
    pub observer_events: usize,
    pub config: RunManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub steps: usize,
}

/// Result of [`run_and_export`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub summary: RunSummary,
    pub wall_seconds: f64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Writes `trajectory.csv`; quantities absent in the chosen mode are left empty.
pub fn write_trajectory_csv(path: &Path, tr: &Trajectory) -> Result<()> {
    let (n, q) = (tr.n, tr.q);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["t".to_string()];
    for name in ["x1", "x2", "x3", "xhat3"] {
        header.extend((1..=n).map(|i| format!("{name}_{i}")));
    }
    for name in ["xi", "p", "pinf"] {
        header.extend((1..=q).map(|j| format!("{name}_{j}")));
    }
    header.extend(["y_m", "V", "residual", "metric_E", "metric_Et", "metric_Ep"].map(String::from));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for s in &tr.samples {
        let mut row = Vec::with_capacity(header.len());
        row.push(s.t.to_string());
        for v in [&s.x1, &s.x2, &s.x3] {
            row.extend(v.iter().map(f64::to_string));
        }
        row.extend((0..n).map(|i| opt(s.x3_hat.as_ref().map(|v| v[i]))));
        row.extend((0..q).map(|j| opt(s.xi.as_ref().map(|v| v[j]))));
        row.extend(s.p.iter().map(f64::to_string));
        row.extend(s.p_inf.iter().map(f64::to_string));
        for v in [s.y_m, s.v, s.residual, s.metric_e, s.metric_et, s.metric_ep] {
            row.push(v.to_string());
        }
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `events.csv` with one row per mode switch of the plant or observer copy.
pub fn write_events_csv(path: &Path, tr: &Trajectory) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["t", "element", "transition", "copy"]).map_err(|e| io_err(path, e))?;
    for e in &tr.events {
        let copy = if e.observer { "observer" } else { "plant" };
        w.write_record([e.t.to_string(), (e.element + 1).to_string(), e.transition.label().to_string(), copy.to_string()])
            .map_err(|err| io_err(path, err))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

fn summarize(run: &ValidatedRun, tr: Option<&Trajectory>, status: &'static str, error: Option<String>) -> RunSummary {
    let m = &run.manifest;
    let fault = &run.scenario.fault;
    let probe = sector_probe(fault, &StateBox { x1_max: 1.0, x3_max: 1.0 }, m.run.probe_samples, m.run.seed);
    let last = tr.and_then(Trajectory::last);
    let final_slip = last.map_or(SlipStats { mean: 0.0, min: 0.0, max: 0.0 }, |s| SlipStats {
        mean: s.x1.mean(),
        min: s.x1.min(),
        max: s.x1.max(),
    });
    RunSummary {
        status,
        error,
        mode: m.sim.mode,
        n: fault.n(),
        q: fault.q(),
        t_final: last.map_or(0.0, |s| s.t),
        final_slip,
        peak_slip_rate: tr.map_or(0.0, |t| t.peak_slip_rate),
        peak_slip_rate_time: tr.map_or(0.0, |t| t.peak_slip_rate_time),
        fast_phase: tr.and_then(|t| t.fast_phase),
        initial_slip_rate: m.sim.initial_rate(),
        reference_peak_rate: m.reference.peak_rate(),
        tail: tr.map(|t| t.tail).unwrap_or_default(),
        monitor: tr.map_or_else(|| crate::passivity::monitor_report(&[], &[], &[]), |t| t.monitor.clone()),
        sector_probe_margin: probe,
        stats: tr.map(|t| t.stats.clone()).unwrap_or_default(),
        plant_events: tr.map_or(0, |t| t.events.iter().filter(|e| !e.observer).count()),
        observer_events: tr.map_or(0, |t| t.events.iter().filter(|e| e.observer).count()),
        config: m.clone(),
    }
}

/// Executes a validated run and writes `trajectory.csv`, `events.csv`,
/// `summary.json` and `timing.json` into `out_dir`.
pub fn run_and_export(run_cfg: &ValidatedRun, out_dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let m = &run_cfg.manifest;
    let start = Instant::now();
    let result = run(&RunSetup {
        scenario: &run_cfg.scenario,
        gains: &run_cfg.gains,
        reference: &m.reference,
        observer: run_cfg.observer.as_ref(),
        config: &m.sim,
    });
    let wall_seconds = start.elapsed().as_secs_f64();
    let (traj, summary, exit_code) = match result {
        Ok(tr) => {
            let (status, code) = if tr.monitor.passed { ("ok", EXIT_OK) } else { ("monitor_failed", EXIT_MONITOR) };
            let s = summarize(run_cfg, Some(&tr), status, None);
            (Some(tr), s, code)
        }
        Err(f) => {
            let partial = f.partial.map(|b| *b);
            let s = summarize(run_cfg, partial.as_ref(), "integration_failed", Some(f.error.to_string()));
            (partial, s, EXIT_INTEGRATION)
        }
    };
    if let Some(tr) = &traj {
        write_trajectory_csv(&out_dir.join("trajectory.csv"), tr)?;
        write_events_csv(&out_dir.join("events.csv"), tr)?;
    }
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_json(&out_dir.join("timing.json"), &Timing { wall_seconds, steps: summary.stats.steps })?;
    Ok(RunOutcome { exit_code, summary, wall_seconds })
}

/// Splits `key=a,b,c`.
pub fn parse_vary(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--vary expects key=a,b,c, got `{spec}`")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(Error::Config(format!("--vary expects key=a,b,c, got `{spec}`")));
    }
    Ok((key.trim().to_string(), values))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub exit_code: i32,
    pub status: String,
    pub final_mean_slip: Option<f64>,
    pub peak_slip_rate: Option<f64>,
    pub plant_events: Option<usize>,
    pub tail_et: Option<f64>,
}

/// Runs one configuration per value of `key` on the rayon pool. Each run
/// writes into `out_root/<key>=<value>`; `sweep.csv` aggregates them.
pub fn sweep(config_path: &Path, key: &str, values: &[String], out_root: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(config_path).map_err(|e| io_err(config_path, e))?;
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|value| {
            let failed = |code: i32, status: &str| SweepRow {
                value: value.clone(),
                exit_code: code,
                status: status.to_string(),
                final_mean_slip: None,
                peak_slip_rate: None,
                plant_events: None,
                tail_et: None,
            };
            let over = [(key.to_string(), value.clone())];
            let validated = match parse_manifest_str(&text, &over).and_then(|m| validate_manifest(m, config_path.parent())) {
                Ok(v) => v,
                Err(e) => return failed(EXIT_VALIDATION, &format!("validation_failed: {e}")),
            };
            let dir = out_root.join(format!("{key}={value}"));
            match run_and_export(&validated, &dir) {
                Ok(o) => SweepRow {
                    value: value.clone(),
                    exit_code: o.exit_code,
                    status: o.summary.status.to_string(),
                    final_mean_slip: Some(o.summary.final_slip.mean),
                    peak_slip_rate: Some(o.summary.peak_slip_rate),
                    plant_events: Some(o.summary.plant_events),
                    tail_et: Some(o.summary.tail.et),
                },
                Err(e) => failed(EXIT_INTEGRATION, &format!("export_failed: {e}")),
            }
        })
        .collect();
    fs::create_dir_all(out_root).map_err(|e| io_err(out_root, e))?;
    let path = out_root.join("sweep.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record([key, "exit_code", "status", "final_mean_slip", "peak_slip_rate", "plant_events", "tail_et"])
        .map_err(|e| io_err(&path, e))?;
    for r in &rows {
        w.write_record([
            r.value.clone(),
            r.exit_code.to_string(),
            r.status.clone(),
            opt(r.final_mean_slip),
            opt(r.peak_slip_rate),
            r.plant_events.map_or(String::new(), |v| v.to_string()),
            opt(r.tail_et),
        ])
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineFigures {
    pub terminal_mean_slip: f64,
    pub events: usize,
    pub peak_slip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub boundary_layer: f64,
    pub engine: EngineFigures,
    pub oracle: EngineFigures,
    /// `|slip_engine - slip_oracle| / |slip_oracle|`.
    pub slip_relative_difference: f64,
    pub event_counts_match: bool,
}

/// Runs the event-driven engine and the regularized oracle on the same manifest.
pub fn oracle_compare(run_cfg: &ValidatedRun) -> Result<OracleComparison> {
    let m = &run_cfg.manifest;
    if !matches!(m.sim.mode, ControlMode::OpenLoop | ControlMode::Stabilize | ControlMode::Track) {
        return Err(Error::Config("oracle-compare supports sim.mode = open_loop, stabilize or track".into()));
    }
    let engine = run(&RunSetup {
        scenario: &run_cfg.scenario,
        gains: &run_cfg.gains,
        reference: &m.reference,
        observer: None,
        config: &m.sim,
    })
    .map_err(|f| f.error)?;
    let layer = m.run.oracle_boundary_layer;
    let oracle = regularized_oracle_run(&run_cfg.scenario.fault, &run_cfg.gains, &m.reference, &m.sim, layer)?;
    let fig = |t: &Trajectory| EngineFigures {
        terminal_mean_slip: t.final_mean_slip(),
        events: t.events.iter().filter(|e| !e.observer).count(),
        peak_slip_rate: t.peak_slip_rate,
    };
    let (e, o) = (fig(&engine), fig(&oracle));
    Ok(OracleComparison {
        boundary_layer: layer,
        slip_relative_difference: (e.terminal_mean_slip - o.terminal_mean_slip).abs() / o.terminal_mean_slip.abs().max(f64::MIN_POSITIVE),
        event_counts_match: e.events == o.events,
        engine: e,
        oracle: o,
    })
}

/// Writes `oracle_compare.json` into `out_dir`.
pub fn export_oracle_comparison(cmp: &OracleComparison, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_json(&out_dir.join("oracle_compare.json"), cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[scenario]\nnx = 2\nnz = 2\n\n[gains]\nlambda_delta = 40.0\nlambda_v = 346.4\nlambda_xi = 5e3\nmu_min = 0.25\nl_delta = 0.04\nl_v = 0.0\n\n[sim]\nmode = \"stabilize\"\nt_end = 1.0\n";

    #[test]
    fn empty_text_lists_sections() {
        let err = parse_manifest_str("", &[]).unwrap_err().to_string();
        for s in REQUIRED_SECTIONS {
            assert!(err.contains(s), "{err}");
        }
    }

    #[test]
    fn dotted_override_reaches_field() {
        let over = [("scenario.element_mass".to_string(), "2.5".to_string())];
        let m = parse_manifest_str(MINIMAL, &over).unwrap();
        assert_eq!(m.scenario.element_mass, 2.5);
        let over = [("sim.mode".to_string(), "track".to_string())];
        assert_eq!(parse_manifest_str(MINIMAL, &over).unwrap().sim.mode, ControlMode::Track);
    }

    #[test]
    fn integer_literal_accepted_for_float() {
        let over = [("gains.lambda_delta".to_string(), "41".to_string())];
        assert_eq!(parse_manifest_str(MINIMAL, &over).unwrap().gains.lambda_delta, 41.0);
    }

    #[test]
    fn unknown_field_named() {
        let err = parse_manifest_str(&format!("{MINIMAL}bogus_knob = 1\n"), &[]).unwrap_err().to_string();
        assert!(err.contains("bogus_knob"), "{err}");
    }

    #[test]
    fn low_gain_quotes_threshold() {
        let over = [("gains.lambda_delta".to_string(), "1".to_string())];
        let m = parse_manifest_str(MINIMAL, &over).unwrap();
        let err = validate_manifest(m, None).unwrap_err().to_string();
        assert!(err.contains("4.16"), "{err}");
    }

    #[test]
    fn vary_parsing() {
        let (k, v) = parse_vary("scenario.element_mass=1,2, 3").unwrap();
        assert_eq!(k, "scenario.element_mass");
        assert_eq!(v, ["1", "2", "3"]);
        assert!(parse_vary("novalues=").is_err());
        assert!(parse_vary("plain").is_err());
    }
}
