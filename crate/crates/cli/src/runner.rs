//! The `run` command: time loop with diagnostics, snapshots, checkpoints and
//! a machine-readable summary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chd_core::diagnostics::{DiagnosticsRow, InvariantReport, InvariantTolerances, InvariantTracker, NormInventory, NormRow};
use chd_core::grid::{read_snapshot, write_snapshot};
use chd_core::stepper::{self, cfl_number, initial_state, reconstruct_velocity, SimState};
use chd_core::{FaceVectorField, ScalarField, StepError};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, LoadedConfig};

/// Schema version of every JSON artifact written by the runner.
pub const ARTIFACT_VERSION: &str = "1.0";

/// Field names of a checkpoint, in write order.
pub const CHECKPOINT_FIELDS: [&str; 4] = ["phi", "mu", "sigma", "pressure"];

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Stop after this step index even if `T` is not reached.
    pub max_steps: Option<u64>,
    /// Continue from the checkpoint in this directory.
    pub resume: Option<PathBuf>,
    /// Suppress progress output on stderr.
    pub quiet: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Halted by `--max-steps` before reaching `T`.
    Stopped,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: &'static str,
    pub run_id: String,
    pub config_hash: String,
    pub variant: &'static str,
    pub status: RunStatus,
    pub step: u64,
    pub t: f64,
    pub target_steps: u64,
    pub error: Option<String>,
    pub invariants: InvariantReport,
    pub norms: Vec<(&'static str, f64)>,
    pub all_pass: bool,
}

impl RunSummary {
    /// Process exit status: 0 ok, 1 invariant failure, 3 step failure.
    pub fn exit_code(&self) -> i32 {
        match (self.status, self.all_pass) {
            (RunStatus::Failed, _) => 3,
            (_, false) => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub run_id: String,
    pub t: f64,
    pub step: u64,
    pub config_hash: String,
    pub fields: Vec<String>,
}

pub fn run_id(config_hash: &str) -> String {
    format!("chd-{}", &config_hash[..12])
}

/// Run a validated configuration, writing all artifacts into `opts.out_dir`.
/// Step failures are reported through the summary, not as `Err`.
pub fn execute(cfg: &LoadedConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let grid = cfg.grid().map_err(|e| cfg.error(&["grid"], e.to_string()))?;
    let params = &cfg.config.params;
    let step_cfg = cfg.step_config();
    let hash = cfg.config_hash();
    let id = run_id(&hash);
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    let target = cfg.steps();
    let last_step = opts.max_steps.map_or(target, |m| m.min(target));

    let initial = match &opts.resume {
        Some(dir) => Ok(load_checkpoint(cfg, dir, &hash)?),
        None => {
            let phi0 = cfg.initial_phi(&grid)?;
            initial_state(params, cfg.config.variant, phi0, cfg.initial_sigma(&grid), &step_cfg)
        }
    };

    let csv_path = out.join("diagnostics.csv");
    let appending = opts.resume.is_some() && csv_path.exists();
    let file = if appending {
        OpenOptions::new().append(true).open(&csv_path)
    } else {
        File::create(&csv_path)
    }
    .map_err(io_err(format!("opening {}", csv_path.display())))?;
    let mut csv = BufWriter::new(file);
    if !appending {
        csv.write_all(DiagnosticsRow::csv_header().as_bytes()).map_err(io_err("writing diagnostics"))?;
    }

    let mut tracker = InvariantTracker::new(cfg.config.variant, InvariantTolerances::default());
    let mut norm_rows: Vec<NormRow> = Vec::new();
    let snapshot_every = cfg.config.snapshot_every;

    let initial = match initial {
        Ok(s) => s,
        Err(e) => {
            csv.flush().map_err(io_err("writing diagnostics"))?;
            let summary = summarize(cfg, &id, &hash, RunStatus::Failed, 0, 0.0, target, Some(&e), &tracker, norm_rows);
            write_summary(out, &summary)?;
            return Ok(summary);
        }
    };

    let first = DiagnosticsRow::of(&initial, None, params, step_cfg.use_cutoff);
    tracker.record(&first);
    norm_rows.push(first.norms);
    if opts.resume.is_none() {
        csv.write_all(first.csv_line(cfl_number(&initial.v, step_cfg.dt)).as_bytes())
            .map_err(io_err("writing diagnostics"))?;
        if snapshot_every > 0 {
            write_fields(&out.join("snapshots"), &initial, true)?;
        }
    }

    let mut io_failure: Option<RunError> = None;
    let quiet = opts.quiet;
    let outcome = stepper::run(initial, &step_cfg, params, last_step, |prev, next| {
        let row = DiagnosticsRow::of(next, Some(prev), params, step_cfg.use_cutoff);
        tracker.record(&row);
        norm_rows.push(row.norms);
        let written = csv
            .write_all(row.csv_line(cfl_number(&next.v, step_cfg.dt)).as_bytes())
            .map_err(io_err("writing diagnostics"))
            .and_then(|_| {
                if snapshot_every > 0 && next.step % snapshot_every == 0 {
                    write_fields(&out.join("snapshots"), next, true)
                } else {
                    Ok(())
                }
            });
        if !quiet && (next.step % 100 == 0 || next.step == last_step) {
            eprintln!("step {}/{} t={:.6e} E={:.6e}", next.step, last_step, next.t, row.energy);
        }
        match written {
            Ok(()) => true,
            Err(e) => {
                io_failure = Some(e);
                false
            }
        }
    });
    csv.flush().map_err(io_err("writing diagnostics"))?;
    if let Some(e) = io_failure {
        return Err(e);
    }

    let last = &outcome.last;
    write_checkpoint(&out.join("checkpoint"), last, &id, &hash)?;
    let status = match (&outcome.error, last.step < target) {
        (Some(_), _) => RunStatus::Failed,
        (None, true) => RunStatus::Stopped,
        (None, false) => RunStatus::Completed,
    };
    let summary = summarize(cfg, &id, &hash, status, last.step, last.t, target, outcome.error.as_ref(), &tracker, norm_rows);
    write_summary(out, &summary)?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    cfg: &LoadedConfig,
    id: &str,
    hash: &str,
    status: RunStatus,
    step: u64,
    t: f64,
    target_steps: u64,
    error: Option<&StepError>,
    tracker: &InvariantTracker,
    rows: Vec<NormRow>,
) -> RunSummary {
    let invariants = tracker.report();
    let norms = if rows.is_empty() { Vec::new() } else { NormInventory::from_rows(rows).aggregates().to_vec() };
    RunSummary {
        schema_version: ARTIFACT_VERSION,
        run_id: id.to_string(),
        config_hash: hash.to_string(),
        variant: cfg.config.variant.name(),
        status,
        step,
        t,
        target_steps,
        error: error.map(|e| e.to_string()),
        all_pass: status != RunStatus::Failed && invariants.all_pass(),
        invariants,
        norms,
    }
}

fn write_summary(out: &Path, summary: &RunSummary) -> Result<(), RunError> {
    let path = out.join("summary.json");
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(io_err(format!("writing {}", path.display())))
}

/// Write `phi`, `mu`, `sigma` and `pressure` of `state`; with `stamped` the
/// file names carry the step index.
fn write_fields(dir: &Path, state: &SimState, stamped: bool) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let fields: [&ScalarField; 4] = [&state.phi, &state.mu, &state.sigma, &state.pressure];
    for (name, field) in CHECKPOINT_FIELDS.iter().zip(fields) {
        let file_name = if stamped { format!("{name}_{:06}.csv", state.step) } else { format!("{name}.csv") };
        let path = dir.join(file_name);
        let ctx = format!("writing {}", path.display());
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(ctx.clone()))?);
        write_snapshot(&mut w, field, state.t).and_then(|_| w.flush()).map_err(io_err(ctx))?;
    }
    Ok(())
}

pub fn write_checkpoint(dir: &Path, state: &SimState, run_id: &str, config_hash: &str) -> Result<(), RunError> {
    write_fields(dir, state, false)?;
    let manifest = Manifest {
        schema_version: ARTIFACT_VERSION.to_string(),
        run_id: run_id.to_string(),
        t: state.t,
        step: state.step,
        config_hash: config_hash.to_string(),
        fields: CHECKPOINT_FIELDS.iter().map(|f| format!("{f}.csv")).collect(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(format!("writing {}", path.display())))
}

/// Restore a state from a checkpoint written by the same configuration. The
/// velocity is not stored; it is rebuilt from the restored fields exactly as
/// the last outer iteration built it.
pub fn load_checkpoint(cfg: &LoadedConfig, dir: &Path, config_hash: &str) -> Result<SimState, RunError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(format!("reading {}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RunError::Io {
        context: format!("parsing {}", manifest_path.display()),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let major = manifest.schema_version.split('.').next();
    if major != ARTIFACT_VERSION.split('.').next() {
        return Err(cfg.error(&[], format!("checkpoint schema version {} is not supported", manifest.schema_version)).into());
    }
    if manifest.config_hash != config_hash {
        return Err(cfg
            .error(&[], format!("checkpoint in {} was written by a different configuration", dir.display()))
            .into());
    }
    let grid = cfg.grid().map_err(|e| cfg.error(&["grid"], e.to_string()))?;
    let mut fields = Vec::with_capacity(4);
    for name in CHECKPOINT_FIELDS {
        let path = dir.join(format!("{name}.csv"));
        let file = File::open(&path).map_err(io_err(format!("opening {}", path.display())))?;
        let field = read_snapshot(BufReader::new(file)).and_then(|s| s.into_field(&grid)).map_err(|e| RunError::Io {
            context: format!("reading {}", path.display()),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        fields.push(field);
    }
    let pressure = fields.pop().expect("four fields");
    let sigma = fields.pop().expect("four fields");
    let mu = fields.pop().expect("four fields");
    let phi = fields.pop().expect("four fields");
    let params = &cfg.config.params;
    let variant = cfg.config.variant;
    let t = manifest.step as f64 * cfg.config.dt;
    let v = if cfg.step_config().couple_flow {
        reconstruct_velocity(params, variant, &phi, &mu, &sigma, &pressure, t)
    } else {
        FaceVectorField::zeros(&grid)
    };
    Ok(SimState { t, step: manifest.step, phi, mu, sigma, v, pressure, variant, transport: None })
}
