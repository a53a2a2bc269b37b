//! θ-continuation: distance of regularized nutrient trajectories from the
//! quasi-static one.

use chd_core::diagnostics::{NormInventory, NormRow};
use chd_core::stepper::{initial_state, run};
use chd_core::{ModelParams, ScalarField, StepError};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, LoadedConfig};

/// Relative slack of the monotonicity check.
pub const SLACK: f64 = 0.1;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    /// `(sum_n dt |sigma^theta_n - sigma^0_n|^2)^(1/2)` over steps `1..=N`.
    pub discrepancy: f64,
    pub norms: Vec<(&'static str, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    /// Rows in decreasing θ order.
    pub rows: Vec<SweepRow>,
    /// Discrepancies non-increasing as θ decreases, within [`SLACK`].
    pub monotone: bool,
    /// Discrepancies strictly decreasing as θ decreases.
    pub strictly_decreasing: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("run with theta = {theta} failed: {source}")]
    Step {
        theta: f64,
        #[source]
        source: StepError,
    },
}

struct Trajectory {
    sigma: Vec<ScalarField>,
    norms: NormInventory,
}

fn trajectory(cfg: &LoadedConfig, theta: f64) -> Result<Trajectory, StepError> {
    let grid = cfg.grid().expect("validated grid");
    let params = ModelParams { theta, ..cfg.config.params.clone() };
    let step_cfg = cfg.step_config();
    let phi0 = cfg.initial_phi(&grid).expect("validated initial condition");
    let init = initial_state(&params, cfg.config.variant, phi0, cfg.initial_sigma(&grid), &step_cfg)?;
    let mut rows = vec![NormRow::of(&init, &params)];
    let mut sigma = Vec::new();
    let out = run(init, &step_cfg, &params, cfg.steps(), |_, next| {
        rows.push(NormRow::of(next, &params));
        sigma.push(next.sigma.clone());
        true
    });
    match out.error {
        Some(e) => Err(e),
        None => Ok(Trajectory { sigma, norms: NormInventory::from_rows(rows) }),
    }
}

/// Run θ = 0 and every θ of `thetas` concurrently and compare.
pub fn theta_sweep(cfg: &LoadedConfig, thetas: &[f64]) -> Result<SweepReport, SweepError> {
    if let Some(bad) = thetas.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(cfg.error(&["params", "theta"], format!("theta must lie in [0, 1], got {bad}")).into());
    }
    cfg.initial_phi(&cfg.grid().map_err(|e| cfg.error(&["grid"], e.to_string()))?)?;
    let mut list: Vec<f64> = thetas.to_vec();
    list.sort_by(|a, b| b.total_cmp(a));
    list.dedup();
    let mut all = list.clone();
    if !all.contains(&0.0) {
        all.push(0.0);
    }
    let runs: Vec<Result<Trajectory, SweepError>> = all
        .par_iter()
        .map(|&theta| trajectory(cfg, theta).map_err(|source| SweepError::Step { theta, source }))
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reference = &runs[all.iter().position(|t| *t == 0.0).expect("zero present")];
    let dt = cfg.config.dt;
    let rows: Vec<SweepRow> = list
        .iter()
        .zip(&runs)
        .map(|(&theta, tr)| {
            let sq: f64 = tr.sigma.iter().zip(&reference.sigma).map(|(a, b)| dt * (a - b).l2_norm().powi(2)).sum();
            SweepRow { theta, discrepancy: sq.sqrt(), norms: tr.norms.aggregates().to_vec() }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].discrepancy <= (1.0 + SLACK) * w[0].discrepancy);
    let strictly_decreasing = rows.windows(2).all(|w| w[1].discrepancy < w[0].discrepancy);
    Ok(SweepReport { rows, monotone, strictly_decreasing })
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut s = String::from("theta,discrepancy");
        if let Some(r) = self.rows.first() {
            for (name, _) in &r.norms {
                s.push(',');
                s.push_str(name);
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:.6e},{:.6e}", r.theta, r.discrepancy));
            for (_, v) in &r.norms {
                s.push_str(&format!(",{v:.6e}"));
            }
            s.push('\n');
        }
        s
    }
}
