//! The `verify` command: run the property suite on a configuration and
//! tabulate pass/fail per structural property.

use std::fmt;

use chd_core::diagnostics::{q_p_velocity_discrepancy, DiagnosticsRow, InvariantTolerances, InvariantTracker};
use chd_core::stepper::{initial_state, q_from_p, run};
use serde::Serialize;

use crate::checks::{energy_decay, galerkin_cross_check, ode_check, pure_ch_config};
use crate::config::LoadedConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    /// Nothing to check (zero steps).
    Vacuous,
    /// The property does not apply to this variant.
    NotApplicable,
    /// Not run because an earlier gate failed.
    Skipped,
}

impl Outcome {
    fn of(pass: bool) -> Outcome {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Vacuous => "PASS (vacuous)",
            Outcome::NotApplicable => "n/a",
            Outcome::Skipped => "SKIPPED",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyRow {
    pub property: &'static str,
    pub anchor: &'static str,
    pub outcome: Outcome,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub notes: Vec<String>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| !matches!(r.outcome, Outcome::Fail | Outcome::Skipped))
    }

    pub fn row(&self, property: &str) -> Option<&VerifyRow> {
        self.rows.iter().find(|r| r.property == property)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:<15} {:>12} {:>10}  anchor / note", "property", "result", "value", "tolerance")?;
        for r in &self.rows {
            let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"));
            write!(f, "{:<22} {:<15} {:>12} {:>10}  {}", r.property, r.outcome.label(), num(r.value), num(r.tolerance), r.anchor)?;
            if !r.note.is_empty() {
                write!(f, "; {}", r.note)?;
            }
            writeln!(f)?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

const PROPERTIES: [(&str, &str); 8] = [
    ("potential growth", "quadratic-growth requirement of the Neumann-mu variant"),
    ("comparison principle", "0 <= sigma <= 1 for every accepted state"),
    ("energy decay", "pure Cahn-Hilliard energy inequality"),
    ("source/flux balance", "int Gamma_v = boundary outflux of v"),
    ("mean-mu identity", "unit test function in the mu equation"),
    ("q-p equivalence", "q = p - (mu + chi sigma) phi gives the same velocity"),
    ("ode oracle", "constant states follow dphi/dt = Gamma_phi(phi, 1)"),
    ("galerkin oracle", "1D grid run matches the cosine Galerkin solver"),
];

fn row(index: usize, outcome: Outcome, value: Option<f64>, tolerance: Option<f64>, note: impl Into<String>) -> VerifyRow {
    let (property, anchor) = PROPERTIES[index];
    VerifyRow { property, anchor, outcome, value, tolerance, note: note.into() }
}

/// Run every check. The configuration must have passed field validation but
/// may violate the variant/potential gate, which is reported as a failure.
pub fn verify(cfg: &LoadedConfig) -> VerifyReport {
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    if let Err(e) = cfg.check_potential() {
        rows.push(row(0, Outcome::Fail, None, None, e.message));
        for k in 1..PROPERTIES.len() {
            rows.push(row(k, Outcome::Skipped, None, None, "potential gate failed"));
        }
        return VerifyReport { rows, notes };
    }
    rows.push(row(0, Outcome::Pass, None, None, ""));
    let steps = cfg.steps();
    if steps == 0 {
        notes.push("no steps: T = 0, so every run-based property holds vacuously".to_string());
        for k in 1..PROPERTIES.len() {
            rows.push(row(k, Outcome::Vacuous, None, None, "no steps"));
        }
        return VerifyReport { rows, notes };
    }

    let grid = cfg.grid().expect("validated grid");
    let params = &cfg.config.params;
    let step_cfg = cfg.step_config();
    let tol = InvariantTolerances::default();
    let variant = cfg.config.variant;
    let main = cfg.initial_phi(&grid).map_err(|e| e.to_string()).and_then(|phi0| {
        initial_state(params, variant, phi0, cfg.initial_sigma(&grid), &step_cfg).map_err(|e| e.to_string())
    });
    match main {
        Err(e) => {
            for k in [1, 3, 4, 5] {
                rows.push(row(k, Outcome::Fail, None, None, format!("initial state failed: {e}")));
            }
        }
        Ok(init) => {
            let mut tracker = InvariantTracker::new(variant, tol);
            tracker.record(&DiagnosticsRow::of(&init, None, params, step_cfg.use_cutoff));
            let out = run(init, &step_cfg, params, steps, |prev, next| {
                tracker.record(&DiagnosticsRow::of(next, Some(prev), params, step_cfg.use_cutoff));
                true
            });
            let rep = tracker.report();
            let failed = out.error.as_ref().map(|e| format!("run stopped at step {}: {e}", out.last.step));
            if let Some(msg) = &failed {
                notes.push(msg.clone());
            }
            let gate = |ok: bool| Outcome::of(ok && failed.is_none());
            let cmp = rep.checks.iter().find(|c| c.name == "comparison_principle").expect("always reported");
            rows.push(row(
                1,
                gate(cmp.pass),
                Some(rep.sigma_min),
                None,
                format!("sigma in [{:.3e}, {:.3e}]", rep.sigma_min, rep.sigma_max),
            ));
            rows.push(row(3, gate(rep.source_flux_residual <= tol.source_flux), Some(rep.source_flux_residual), Some(tol.source_flux), ""));
            if variant == chd_core::Variant::RobinPMuNeumann {
                rows.push(row(4, gate(rep.mean_mu_residual <= tol.mean_mu), Some(rep.mean_mu_residual), Some(tol.mean_mu), ""));
            } else {
                rows.push(row(4, Outcome::NotApplicable, None, None, "Neumann-mu variant only"));
            }
            let last = &out.last;
            let q_p = if variant.uses_q() {
                rep.q_p_equivalence_error
            } else {
                let q = q_from_p(params, &last.pressure, &last.phi, &last.mu, &last.sigma);
                q_p_velocity_discrepancy(params, &last.phi, &last.mu, &last.sigma, &q)
            };
            rows.push(row(5, Outcome::of(q_p <= tol.q_p), Some(q_p), Some(tol.q_p), "interior faces"));
            notes.push(format!(
                "largest energy-balance residual {:.3e} (consistency: first order in dt)",
                rep.energy_balance_residual
            ));
        }
    }

    let decay_steps = steps.min(50);
    let decay_tol = 1e-12;
    let decay = cfg
        .initial_phi(&grid)
        .map_err(|e| e.to_string())
        .and_then(|phi0| energy_decay(phi0, params, decay_steps, &pure_ch_config(cfg.config.dt, 1e-10), decay_tol).map_err(|e| e.to_string()));
    rows.push(match decay {
        Ok(d) => row(2, Outcome::of(d.pass), Some(d.worst_increase), Some(decay_tol), format!("{decay_steps} pure-CH steps")),
        Err(e) => row(2, Outcome::Fail, None, None, e),
    });

    let ode_tol = 1e-6;
    rows.push(match ode_check(params, 0.0, 1.0, 1e-3, ode_tol) {
        Ok(o) => row(6, Outcome::of(o.pass), Some(o.error), Some(ode_tol), format!("phi(1) = {:.9}", o.grid_value)),
        Err(e) => row(6, Outcome::Fail, None, None, e.to_string()),
    });
    let gal_tol = 1e-3;
    rows.push(match galerkin_cross_check(params, 128, 32, 1e-4, 100, gal_tol) {
        Ok(c) => row(7, Outcome::of(c.pass), Some(c.max_l2), Some(gal_tol), c.note.unwrap_or_default()),
        Err(e) => row(7, Outcome::Fail, None, None, e.to_string()),
    });
    rows.sort_by_key(|r| PROPERTIES.iter().position(|(p, _)| *p == r.property));
    VerifyReport { rows, notes }
}
