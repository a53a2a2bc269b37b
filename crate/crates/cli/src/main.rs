use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chd_cli::config::{ConfigError, LoadedConfig};
use chd_cli::mms::{mms_study, DEFAULT_LEVELS};
use chd_cli::runner::{execute, RunError, RunOptions, RunStatus};
use chd_cli::sweep::{theta_sweep, SweepError};
use chd_cli::verify::verify;
use chd_cli::{EXIT_CONFIG, EXIT_IO, EXIT_STEP};
use clap::{Args, Parser, Subcommand};

/// Cahn-Hilliard-Darcy tumour growth simulator.
#[derive(Parser)]
#[command(name = "chd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    config: PathBuf,
    /// Output directory; overrides CHD_OUT and the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configuration's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write diagnostics, snapshots and a checkpoint.
    Run {
        #[command(flatten)]
        common: Common,
        /// Snapshot cadence in steps (0 disables).
        #[arg(long)]
        snapshots: Option<u64>,
        /// Stop after this step index.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Resume from the checkpoint directory of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Compare regularized nutrient trajectories with the quasi-static one.
    SweepTheta {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list of theta values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        thetas: Vec<f64>,
    },
    /// Manufactured-solution convergence study of the spatial operators.
    Mms {
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid sizes.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
    /// Run the property suite and print a pass/fail matrix.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(flag: &Option<PathBuf>, cfg: &LoadedConfig) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("CHD_OUT").map(PathBuf::from))
        .or_else(|| cfg.config.output_dir.clone().map(|d| cfg.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("chd-out"))
}

fn load(common: &Common, gated: bool) -> Result<LoadedConfig, ConfigError> {
    let mut cfg = if gated {
        LoadedConfig::from_path(&common.config)
    } else {
        LoadedConfig::from_path_ungated(&common.config)
    }?;
    if let Some(seed) = common.seed {
        cfg.config.seed = seed;
    }
    Ok(cfg)
}

fn config_failure(e: &ConfigError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG as u8)
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), ExitCode> {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(name), contents))
        .map_err(|e| {
            eprintln!("error: writing {}: {e}", dir.join(name).display());
            ExitCode::from(EXIT_IO as u8)
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, snapshots, max_steps, resume, quiet } => {
            let mut cfg = match load(&common, true) {
                Ok(c) => c,
                Err(e) => return config_failure(&e),
            };
            if let Some(k) = snapshots {
                cfg.config.snapshot_every = k;
            }
            let opts = RunOptions { out_dir: out_dir(&common.out, &cfg), max_steps, resume, quiet };
            match execute(&cfg, &opts) {
                Ok(summary) => {
                    let report = &summary.invariants;
                    println!("run {} {:?} at step {} (t = {:.6e})", summary.run_id, summary.status, summary.step, summary.t);
                    for c in &report.checks {
                        let flag = if !c.applicable { "n/a" } else if c.pass { "PASS" } else { "FAIL" };
                        println!("  {:<24} {:<5} {:.3e} (tol {:.1e})", c.name, flag, c.value, c.tolerance);
                    }
                    if let Some(err) = &summary.error {
                        eprintln!("error: {err}");
                    }
                    if summary.status == RunStatus::Failed {
                        eprintln!("partial outputs written to {}", opts.out_dir.display());
                    }
                    ExitCode::from(summary.exit_code() as u8)
                }
                Err(RunError::Config(e)) => config_failure(&e),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_IO as u8)
                }
            }
        }
        Command::SweepTheta { common, thetas } => {
            let cfg = match load(&common, true) {
                Ok(c) => c,
                Err(e) => return config_failure(&e),
            };
            match theta_sweep(&cfg, &thetas) {
                Ok(report) => {
                    let table = report.table();
                    print!("{table}");
                    if let Err(code) = write_artifact(&out_dir(&common.out, &cfg), "sweep.csv", &table) {
                        return code;
                    }
                    println!("monotone within 10%: {}", report.monotone);
                    ExitCode::from(if report.monotone { 0 } else { 1 })
                }
                Err(SweepError::Config(e)) => config_failure(&e),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_STEP as u8)
                }
            }
        }
        Command::Mms { common, levels } => {
            let cfg = match load(&common, true) {
                Ok(c) => c,
                Err(e) => return config_failure(&e),
            };
            let levels = levels.unwrap_or_else(|| DEFAULT_LEVELS.to_vec());
            if levels.len() < 2 || levels.iter().any(|&n| n < 3) || levels.windows(2).any(|w| w[1] <= w[0]) {
                eprintln!("error: --levels needs at least two increasing grid sizes >= 3");
                return ExitCode::from(EXIT_CONFIG as u8);
            }
            match mms_study(&cfg.config.params, &levels) {
                Ok(report) => {
                    println!("{:<22} {:>12} errors", "study", "min order");
                    for s in &report.studies {
                        let errs: Vec<String> = s.errors.iter().map(|e| format!("{e:.3e}")).collect();
                        println!("{:<22} {:>12.3} {} {}", s.name, s.min_order(), errs.join(" "), if s.pass { "PASS" } else { "FAIL" });
                    }
                    println!("q/p velocity discrepancy (interior faces): {:.3e}", report.q_p_discrepancy);
                    let json = serde_json::to_string_pretty(&report).expect("report serializes");
                    if let Err(code) = write_artifact(&out_dir(&common.out, &cfg), "mms.json", &(json + "\n")) {
                        return code;
                    }
                    ExitCode::from(if report.all_pass() { 0 } else { 1 })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_STEP as u8)
                }
            }
        }
        Command::Verify { common } => {
            let cfg = match load(&common, false) {
                Ok(c) => c,
                Err(e) => return config_failure(&e),
            };
            let report = verify(&cfg);
            print!("{report}");
            ExitCode::from(if report.all_pass() { 0 } else { 1 })
        }
    }
}
