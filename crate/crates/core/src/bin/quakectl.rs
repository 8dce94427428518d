use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use quakectl::cli::{self, EXIT_INTEGRATION, EXIT_OK, EXIT_VALIDATION};

/// Stabilization and aseismic tracking of frictional faults.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its outputs.
    Run {
        config: PathBuf,
        /// Output directory (overrides `run.output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one configuration per value of a dotted key, in parallel.
    Sweep {
        config: PathBuf,
        /// Parameter and values, e.g. `scenario.element_mass=1e-4,5e-4`.
        #[arg(long)]
        vary: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a configuration without running it.
    Validate { config: PathBuf },
    /// Compare the event-driven engine with the regularized oracle.
    OracleCompare {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(u8::try_from(c).unwrap_or(1))
}

fn invalid(path: &Path, e: quakectl::Error) -> ExitCode {
    eprintln!("{}: {e}", path.display());
    code(EXIT_VALIDATION)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::Validate { config } => match cli::parse_config(&config) {
            Ok(v) => {
                println!(
                    "{}: ok (n = {}, q = {}, mode = {:?})",
                    config.display(),
                    v.scenario.fault.n(),
                    v.scenario.fault.q(),
                    v.manifest.sim.mode
                );
                code(EXIT_OK)
            }
            Err(e) => invalid(&config, e),
        },
        Command::Run { config, out } => {
            let v = match cli::parse_config(&config) {
                Ok(v) => v,
                Err(e) => return invalid(&config, e),
            };
            let dir = cli::resolve_output_dir(out.as_deref(), &v.manifest, &config);
            match cli::run_and_export(&v, &dir) {
                Ok(o) => {
                    let s = &o.summary;
                    println!(
                        "{}: {} t = {:.6e} s, mean slip {:.6} m, peak slip-rate {:.3e} m/s, {} events, {:.1} s wall",
                        dir.display(),
                        s.status,
                        s.t_final,
                        s.final_slip.mean,
                        s.peak_slip_rate,
                        s.plant_events,
                        o.wall_seconds
                    );
                    if let Some(e) = &s.error {
                        eprintln!("{e}");
                    }
                    code(o.exit_code)
                }
                Err(e) => {
                    eprintln!("{e}");
                    code(EXIT_INTEGRATION)
                }
            }
        }
        Command::Sweep { config, vary, out } => {
            let (key, values) = match cli::parse_vary(&vary) {
                Ok(kv) => kv,
                Err(e) => return invalid(&config, e),
            };
            let base = match std::fs::read_to_string(&config)
                .map_err(|e| quakectl::Error::Io { path: config.display().to_string(), message: e.to_string() })
                .and_then(|t| cli::parse_manifest_str(&t, &[]))
            {
                Ok(m) => m,
                Err(e) => return invalid(&config, e),
            };
            let dir = cli::resolve_output_dir(out.as_deref(), &base, &config);
            match cli::sweep(&config, &key, &values, &dir) {
                Ok(rows) => {
                    for r in &rows {
                        println!("{key}={}: {}", r.value, r.status);
                    }
                    code(rows.iter().map(|r| r.exit_code).max().unwrap_or(EXIT_OK))
                }
                Err(e) => {
                    eprintln!("{e}");
                    code(EXIT_INTEGRATION)
                }
            }
        }
        Command::OracleCompare { config, out } => {
            let v = match cli::parse_config(&config) {
                Ok(v) => v,
                Err(e) => return invalid(&config, e),
            };
            let cmp = match cli::oracle_compare(&v) {
                Ok(c) => c,
                Err(quakectl::Error::Config(m)) => return invalid(&config, quakectl::Error::Config(m)),
                Err(e) => {
                    eprintln!("{e}");
                    return code(EXIT_INTEGRATION);
                }
            };
            let dir = cli::resolve_output_dir(out.as_deref(), &v.manifest, &config);
            if let Err(e) = cli::export_oracle_comparison(&cmp, &dir) {
                eprintln!("{e}");
                return code(EXIT_INTEGRATION);
            }
            println!(
                "engine slip {:.6} m ({} events), oracle slip {:.6} m ({} events), relative difference {:.3e}",
                cmp.engine.terminal_mean_slip,
                cmp.engine.events,
                cmp.oracle.terminal_mean_slip,
                cmp.oracle.events,
                cmp.slip_relative_difference
            );
            code(EXIT_OK)
        }
    }
}
