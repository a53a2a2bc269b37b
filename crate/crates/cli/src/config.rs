//! Run configuration: JSON schema, validation with line-anchored errors, and
//! initial-condition construction.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chd_core::grid::read_snapshot;
use chd_core::{Grid2D, GridError, ModelError, ModelParams, ScalarField, StepConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Major version accepted by this reader.
pub const CONFIG_MAJOR: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(rename = "Lx", default = "unit")]
    pub lx: f64,
    #[serde(rename = "Ly", default = "unit")]
    pub ly: f64,
    /// Mirror the y direction so the run is a quasi-1D slab.
    #[serde(default)]
    pub slab: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Constant {
        value: f64,
    },
    /// `mean + amplitude * U(-1, 1)` per cell, drawn in cell order.
    Random {
        #[serde(default)]
        mean: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        /// Falls back to the top-level seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// `-tanh(d / (sqrt(2) width))` with `d` the signed distance to a circle of
    /// `radius` about `center`, or to the line `x = center[0]` when `radius` is absent.
    Tanh {
        center: [f64; 2],
        #[serde(default)]
        radius: Option<f64>,
        width: f64,
    },
    Snapshot {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_nutrient_tol")]
    pub nutrient_tol: f64,
    #[serde(default = "default_pressure_tol")]
    pub pressure_tol: f64,
    #[serde(default = "default_ch_tol")]
    pub ch_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            nutrient_tol: default_nutrient_tol(),
            pressure_tol: default_pressure_tol(),
            ch_tol: default_ch_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    pub grid: GridSpec,
    pub variant: Variant,
    #[serde(default)]
    pub params: ModelParams,
    pub initial: InitialCondition,
    /// Constant initial nutrient in `[0, 1]`; absent means the quasi-static
    /// solve from the initial phase field.
    #[serde(default)]
    pub sigma0: Option<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    #[serde(default = "yes")]
    pub use_cutoff: bool,
    /// Snapshot cadence in steps; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_every: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSpec,
}

fn unit() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_amplitude() -> f64 {
    1e-2
}
fn default_outer_iters() -> usize {
    2
}
fn default_nutrient_tol() -> f64 {
    StepConfig::default().nutrient_tol
}
fn default_pressure_tol() -> f64 {
    StepConfig::default().pressure_tol
}
fn default_ch_tol() -> f64 {
    StepConfig::default().ch_tol
}
fn default_max_iter() -> usize {
    StepConfig::default().max_iter
}

/// A configuration problem, anchored to a line of the source text when one
/// can be located.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: ", self.source_name, l)?,
            None => write!(f, "{}: ", self.source_name)?,
        }
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

/// A parsed configuration together with its source text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source_name: String,
    pub text: String,
    /// Directory against which relative paths in the config resolve.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let (text, name, base) = read_source(path)?;
        LoadedConfig::from_text(&text, &name, base)
    }

    pub fn from_path_ungated(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let (text, name, base) = read_source(path)?;
        LoadedConfig::from_text_ungated(&text, &name, base)
    }

    /// Parse and validate. Schema violations carry serde's line; semantic ones
    /// are anchored to the line where the offending key appears.
    pub fn from_text(text: &str, source_name: &str, base_dir: PathBuf) -> Result<LoadedConfig, ConfigError> {
        let loaded = LoadedConfig::parse(text, source_name, base_dir)?;
        loaded.validate()?;
        Ok(loaded)
    }

    /// Parse and validate everything except the variant/potential gate, which
    /// `verify` reports as a failed check instead of a config error.
    pub fn from_text_ungated(text: &str, source_name: &str, base_dir: PathBuf) -> Result<LoadedConfig, ConfigError> {
        let loaded = LoadedConfig::parse(text, source_name, base_dir)?;
        loaded.validate_fields()?;
        Ok(loaded)
    }

    fn parse(text: &str, source_name: &str, base_dir: PathBuf) -> Result<LoadedConfig, ConfigError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError {
            source_name: source_name.to_string(),
            line: (e.line() > 0).then_some(e.line()),
            key: String::new(),
            message: format!("schema violation: {e}"),
        })?;
        Ok(LoadedConfig { config, source_name: source_name.to_string(), text: text.to_string(), base_dir })
    }

    pub fn error(&self, path: &[&str], message: impl Into<String>) -> ConfigError {
        ConfigError {
            source_name: self.source_name.clone(),
            line: locate_key(&self.text, path),
            key: path.join("."),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_fields()?;
        self.check_potential()
    }

    /// The quadratic-growth gate of the Neumann chemical-potential variant.
    pub fn check_potential(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if c.variant.check_potential(&c.params).is_err() {
            let key: &[&str] = match locate_key(&self.text, &["params", "potential"]) {
                Some(_) => &["params", "potential"],
                None => &["variant"],
            };
            return Err(self.error(
                key,
                format!(
                    "variant {} violates the quadratic-growth requirement: the potential must have a bounded \
                     second derivative (use {{\"kind\": \"truncated_quartic\"}})",
                    c.variant.name()
                ),
            ));
        }
        Ok(())
    }

    pub fn validate_fields(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        let major = c.schema_version.split('.').next().and_then(|m| m.parse::<u32>().ok());
        if major != Some(CONFIG_MAJOR) {
            return Err(self.error(
                &["schema_version"],
                format!("unsupported schema version {:?}; this reader accepts {CONFIG_MAJOR}.x", c.schema_version),
            ));
        }
        self.grid().map_err(|e| self.error(&["grid"], e.to_string()))?;
        c.params.validate().map_err(|e| self.model_error(&e))?;
        if !(c.t_end.is_finite() && c.t_end >= 0.0) {
            return Err(self.error(&["T"], format!("final time must be finite and non-negative, got {}", c.t_end)));
        }
        if !(c.dt.is_finite() && c.dt > 0.0) {
            return Err(self.error(&["dt"], format!("time step must be positive, got {}", c.dt)));
        }
        if c.outer_iters == 0 {
            return Err(self.error(&["outer_iters"], "at least one outer iteration is required"));
        }
        if let Some(s) = c.sigma0 {
            if !(0.0..=1.0).contains(&s) {
                return Err(self.error(&["sigma0"], format!("initial nutrient must lie in [0, 1], got {s}")));
            }
        }
        let s = &c.solver;
        for (name, tol) in [("nutrient_tol", s.nutrient_tol), ("pressure_tol", s.pressure_tol), ("ch_tol", s.ch_tol)] {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(self.error(&["solver", name], format!("tolerance must lie in (0, 1), got {tol}")));
            }
        }
        if s.max_iter == 0 {
            return Err(self.error(&["solver", "max_iter"], "max_iter must be positive"));
        }
        match &c.initial {
            InitialCondition::Constant { value } if !value.is_finite() => {
                Err(self.error(&["initial", "value"], "initial value must be finite"))
            }
            InitialCondition::Random { mean, amplitude, .. } if !(mean.is_finite() && *amplitude >= 0.0 && amplitude.is_finite()) => {
                Err(self.error(&["initial", "amplitude"], "random perturbation needs a finite mean and amplitude >= 0"))
            }
            InitialCondition::Tanh { width, radius, .. } if !(*width > 0.0) || radius.is_some_and(|r| !(r > 0.0)) => {
                Err(self.error(&["initial", "width"], "tanh interface needs width > 0 and radius > 0"))
            }
            _ => Ok(()),
        }
    }

    fn model_error(&self, e: &ModelError) -> ConfigError {
        let key: String = match e {
            ModelError::NotPositive { name, .. } => (*name).to_string(),
            ModelError::NegativeChi(_) => "chi".into(),
            ModelError::ThetaRange(_) => "theta".into(),
            ModelError::MobilityBounds { .. } => "mobility".into(),
            ModelError::TruncationThreshold(_) => "s_star".into(),
            ModelError::InvalidShape(n) | ModelError::SourceBound(n) => n.clone(),
            ModelError::BoundaryDatum => "g".into(),
        };
        let what = match e {
            ModelError::NotPositive { .. } => " (positivity of A, B, K, a)",
            ModelError::ThetaRange(_) => " (regularization range)",
            _ => "",
        };
        self.error(&["params", &key], format!("{e}{what}"))
    }

    pub fn grid(&self) -> Result<Grid2D, GridError> {
        let g = &self.config.grid;
        if g.slab {
            Grid2D::slab(g.nx, g.ny, g.lx, g.ly)
        } else {
            Grid2D::new(g.nx, g.ny, g.lx, g.ly)
        }
    }

    pub fn step_config(&self) -> StepConfig {
        let c = &self.config;
        StepConfig {
            dt: c.dt,
            outer_iters: c.outer_iters,
            use_cutoff: c.use_cutoff,
            couple_flow: true,
            nutrient_tol: c.solver.nutrient_tol,
            pressure_tol: c.solver.pressure_tol,
            ch_tol: c.solver.ch_tol,
            max_iter: c.solver.max_iter,
        }
    }

    pub fn steps(&self) -> u64 {
        chd_core::stepper::step_count(self.config.t_end, self.config.dt)
    }

    /// Initial phase field; snapshot problems are reported as config errors.
    pub fn initial_phi(&self, grid: &Grid2D) -> Result<ScalarField, ConfigError> {
        let c = &self.config;
        let phi = match &c.initial {
            InitialCondition::Constant { value } => ScalarField::constant(grid, *value),
            InitialCondition::Random { mean, amplitude, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(c.seed));
                let values = (0..grid.cells()).map(|_| mean + amplitude * rng.gen_range(-1.0..=1.0)).collect();
                ScalarField::from_values(grid, values).expect("cell count matches")
            }
            InitialCondition::Tanh { center, radius, width } => {
                let scale = std::f64::consts::SQRT_2 * width;
                ScalarField::from_fn(grid, |x, y| {
                    let d = match radius {
                        Some(r) => ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt() - r,
                        None => x - center[0],
                    };
                    -(d / scale).tanh()
                })
            }
            InitialCondition::Snapshot { path } => {
                let full = self.base_dir.join(path);
                let file = File::open(&full)
                    .map_err(|e| self.error(&["initial", "path"], format!("cannot open {}: {e}", full.display())))?;
                read_snapshot(BufReader::new(file))
                    .and_then(|s| s.into_field(grid))
                    .map_err(|e| self.error(&["initial", "path"], e.to_string()))?
            }
        };
        if !phi.is_finite() {
            return Err(self.error(&["initial"], "initial phase field is not finite"));
        }
        Ok(phi)
    }

    pub fn initial_sigma(&self, grid: &Grid2D) -> Option<ScalarField> {
        self.config.sigma0.map(|s| ScalarField::constant(grid, s))
    }

    /// SHA-256 of the canonical JSON of the config, excluding the output
    /// directory so that relocating a run does not change its identity.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.config.clone();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn read_source(path: &Path) -> Result<(String, String, PathBuf), ConfigError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        source_name: name.clone(),
        line: None,
        key: String::new(),
        message: format!("cannot read config: {e}"),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((text, name, base))
}

/// 1-based line of the last key in `path`, searching each key after the
/// position of the previous one.
pub fn locate_key(text: &str, path: &[&str]) -> Option<usize> {
    let mut from = 0;
    let mut found = None;
    for key in path {
        let needle = format!("\"{key}\"");
        let mut search = from;
        loop {
            let pos = search + text[search..].find(&needle)?;
            let after = text[pos + needle.len()..].trim_start();
            if after.starts_with(':') {
                found = Some(pos);
                from = pos + needle.len();
                break;
            }
            search = pos + needle.len();
        }
    }
    found.map(|pos| text[..pos].matches('\n').count() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
  "schema_version": "1.0",
  "grid": {"nx": 8, "ny": 8},
  "variant": "ROBIN_P_MU0",
  "params": {
    "A": 1.0,
    "a": 1.0
  },
  "initial": {"kind": "constant", "value": 0.0},
  "T": 1e-3,
  "dt": 1e-4
}"#;

    fn load(text: &str) -> Result<LoadedConfig, ConfigError> {
        LoadedConfig::from_text(text, "cfg.json", PathBuf::new())
    }

    #[test]
    fn base_config_is_valid() {
        let c = load(BASE).unwrap();
        assert_eq!(c.steps(), 10);
        assert_eq!(c.config.outer_iters, 2);
        assert!(c.config.use_cutoff);
    }

    #[test]
    fn negative_robin_coefficient_points_at_its_line() {
        let err = load(&BASE.replace("\"a\": 1.0", "\"a\": -1.0")).unwrap_err();
        assert_eq!(err.line, Some(7));
        assert_eq!(err.key, "params.a");
        assert!(err.to_string().contains("positivity"), "{err}");
    }

    #[test]
    fn quartic_with_neumann_mu_is_rejected() {
        let err = load(&BASE.replace("ROBIN_P_MU0", "ROBIN_P_MUNEUMANN")).unwrap_err();
        assert!(err.message.contains("quadratic-growth"), "{err}");
    }

    #[test]
    fn unknown_key_reports_serde_line() {
        let err = load(&BASE.replace("\"dt\"", "\"dtt\"")).unwrap_err();
        assert_eq!(err.line, Some(11));
    }

    #[test]
    fn future_major_version_is_rejected() {
        assert!(load(&BASE.replace("\"1.0\"", "\"2.0\"")).is_err());
    }

    #[test]
    fn sigma0_outside_unit_interval_is_rejected() {
        let err = load(&BASE.replace("\"T\"", "\"sigma0\": 1.5,\n  \"T\"")).unwrap_err();
        assert_eq!(err.key, "sigma0");
    }

    #[test]
    fn random_initial_condition_is_seeded() {
        let text = BASE.replace(r#"{"kind": "constant", "value": 0.0}"#, r#"{"kind": "random", "mean": 0.1}"#);
        let c = load(&text).unwrap();
        let g = c.grid().unwrap();
        let a = c.initial_phi(&g).unwrap();
        let b = c.initial_phi(&g).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (v - 0.1).abs() <= 1e-2));
        let mut other = c.clone();
        other.config.seed = 7;
        assert_ne!(other.initial_phi(&g).unwrap(), a);
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let a = load(BASE).unwrap();
        let mut b = a.clone();
        b.config.output_dir = Some("elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        b.config.dt = 2e-4;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
