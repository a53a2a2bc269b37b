//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary so the lines are always printed.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use chd_cli::checks::{dispersion_check, energy_decay, galerkin_cross_check, ode_check, pure_ch_config};
use chd_cli::config::LoadedConfig;
use chd_cli::mms::{mms_study, velocity_errors, MIN_ORDER};
use chd_cli::sweep::theta_sweep;
use chd_core::diagnostics::{
    energy_balance_residual, mean_mu_residual, mean_mu_residual_pointwise, source_flux_residual, SIGMA_BOUNDS,
};
use chd_core::model::{PotentialSpec, Shape, SourceSpec};
use chd_core::stepper::{initial_state, run};
use chd_core::{Grid2D, ModelParams, ScalarField, StepConfig, Variant};
use serde_json::{json, Value};

type Verdict = Result<String, String>;

fn config(value: Value) -> LoadedConfig {
    LoadedConfig::from_text(&value.to_string(), "acceptance.json", std::path::PathBuf::new()).expect("valid acceptance config")
}

fn sources() -> Value {
    serde_json::to_value(SourceSpec::growth_apoptosis(1.0, 0.1, 0.5)).unwrap()
}

fn base_params(theta: f64) -> Value {
    json!({
        "A": 1.0, "B": 2.5e-3, "chi": 0.5, "K": 1.0, "a": 1.0, "theta": theta,
        "potential": {"kind": "truncated_quartic"},
        "sources": sources()
    })
}

/// Worst per-step residuals of the default matrix, shared by criteria 1, 3 and 4.
struct MatrixOutcome {
    sigma_min: f64,
    sigma_max: f64,
    source_flux: f64,
    mean_mu: f64,
    runs: usize,
    failures: Vec<String>,
    seconds: f64,
}

fn default_matrix() -> MatrixOutcome {
    let start = Instant::now();
    let mut out = MatrixOutcome {
        sigma_min: f64::INFINITY,
        sigma_max: f64::NEG_INFINITY,
        source_flux: 0.0,
        mean_mu: 0.0,
        runs: 0,
        failures: Vec::new(),
        seconds: 0.0,
    };
    let initials = [
        json!({"kind": "random", "mean": 0.0, "amplitude": 0.05}),
        json!({"kind": "tanh", "center": [0.5, 0.5], "radius": 0.25, "width": 0.03}),
    ];
    for variant in Variant::ALL {
        for theta in [0.0, 1e-2] {
            for initial in &initials {
                let cfg = config(json!({
                    "schema_version": "1.0",
                    "grid": {"nx": 64, "ny": 64},
                    "variant": variant.name(),
                    "params": base_params(theta),
                    "initial": initial,
                    "T": 2e-3, "dt": 1e-5, "seed": 7
                }));
                let grid = cfg.grid().unwrap();
                let params = &cfg.config.params;
                let step_cfg = cfg.step_config();
                let init = match initial_state(params, variant, cfg.initial_phi(&grid).unwrap(), None, &step_cfg) {
                    Ok(s) => s,
                    Err(e) => {
                        out.failures.push(format!("{} theta={theta}: {e}", variant.name()));
                        continue;
                    }
                };
                out.sigma_min = out.sigma_min.min(init.sigma.min());
                out.sigma_max = out.sigma_max.max(init.sigma.max());
                let result = run(init, &step_cfg, params, cfg.steps(), |_, next| {
                    out.sigma_min = out.sigma_min.min(next.sigma.min());
                    out.sigma_max = out.sigma_max.max(next.sigma.max());
                    out.source_flux = out.source_flux.max(source_flux_residual(next, params, step_cfg.use_cutoff));
                    if variant == Variant::RobinPMuNeumann {
                        out.mean_mu = out.mean_mu.max(mean_mu_residual(next, params));
                    }
                    true
                });
                if let Some(e) = result.error {
                    out.failures.push(format!("{} theta={theta}: step {}: {e}", variant.name(), result.last.step));
                }
                out.runs += 1;
            }
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}

fn criterion_1(m: &MatrixOutcome) -> Verdict {
    let inside = m.sigma_min >= SIGMA_BOUNDS.0 && m.sigma_max <= SIGMA_BOUNDS.1;
    let detail = format!(
        "{} runs x 200 steps on 64^2, sigma in [{:.3e}, {:.12}], {:.0} s",
        m.runs, m.sigma_min, m.sigma_max, m.seconds
    );
    if inside && m.failures.is_empty() && m.runs == 12 && m.seconds < 300.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; failures: {:?}", m.failures))
    }
}

fn criterion_2() -> Verdict {
    let grid = Grid2D::new(64, 64, 1.0, 1.0).unwrap();
    let cfg = config(json!({
        "schema_version": "1.0",
        "grid": {"nx": 64, "ny": 64},
        "variant": "DIRICHLET_Q",
        "params": {"A": 1.0, "B": 2.5e-3},
        "initial": {"kind": "random", "mean": 0.0, "amplitude": 0.05},
        "T": 0.0, "dt": 1e-5, "seed": 11
    }));
    let phi0 = cfg.initial_phi(&grid).unwrap();
    let d = energy_decay(phi0, &cfg.config.params, 500, &pure_ch_config(2e-5, 1e-10), 1e-12).map_err(|e| e.to_string())?;
    let detail = format!(
        "500 steps, E {:.6e} -> {:.6e}, worst relative increase {:.3e} (tol 1e-12)",
        d.energies[0],
        d.energies.last().unwrap(),
        d.worst_increase
    );
    if d.pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3(m: &MatrixOutcome) -> Verdict {
    let detail = format!("worst relative |int Gamma_v - outflux| = {:.3e} (tol 1e-8)", m.source_flux);
    if m.source_flux <= 1e-8 && m.failures.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4(m: &MatrixOutcome) -> Verdict {
    // source-free run with tight solves: the identity against the pointwise Psi'
    let cfg = config(json!({
        "schema_version": "1.0",
        "grid": {"nx": 64, "ny": 64},
        "variant": "ROBIN_P_MUNEUMANN",
        "params": {"A": 1.0, "B": 2.5e-3, "chi": 0.5, "potential": {"kind": "truncated_quartic"}},
        "initial": {"kind": "tanh", "center": [0.5, 0.5], "radius": 0.25, "width": 0.03},
        "T": 1e-3, "dt": 1e-5,
        "solver": {"ch_tol": 1e-12, "pressure_tol": 1e-12, "nutrient_tol": 1e-12}
    }));
    let grid = cfg.grid().unwrap();
    let params = &cfg.config.params;
    let step_cfg = cfg.step_config();
    let init = initial_state(params, Variant::RobinPMuNeumann, cfg.initial_phi(&grid).unwrap(), None, &step_cfg)
        .map_err(|e| e.to_string())?;
    let mut pointwise = 0.0f64;
    let out = run(init, &step_cfg, params, cfg.steps(), |_, next| {
        pointwise = pointwise.max(mean_mu_residual_pointwise(next, params));
        true
    });
    if let Some(e) = out.error {
        return Err(e.to_string());
    }
    let detail = format!(
        "discrete identity (sources on, 4 runs) {:.3e}; pointwise Psi' (source-free) {:.3e}; tol 1e-8",
        m.mean_mu, pointwise
    );
    if m.mean_mu <= 1e-8 && pointwise <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|e| (e[0] / e[1]).log2()).collect()
}

fn criterion_5() -> Verdict {
    let params = ModelParams { chi: 0.5, ..ModelParams::default() };
    let mut eq = Vec::new();
    let mut ep = Vec::new();
    let mut disc = 0.0f64;
    for n in [32, 64, 128] {
        let (a, b, d) = velocity_errors(&params, n);
        eq.push(a);
        ep.push(b);
        disc = disc.max(d);
    }
    let (oq, op) = (orders(&eq), orders(&ep));
    let min = oq.iter().chain(&op).copied().fold(f64::INFINITY, f64::min);
    let detail = format!("q-form orders {oq:.3?}, p-form orders {op:.3?}, interior q/p discrepancy {disc:.3e}");
    if min >= 1.8 && disc <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Verdict {
    let cfg = config(json!({
        "schema_version": "1.0",
        "grid": {"nx": 32, "ny": 32},
        "variant": "DIRICHLET_Q",
        "params": {
            "A": 1.0, "B": 1e-2, "chi": 0.5,
            "potential": {"kind": "truncated_quartic"},
            "sources": sources()
        },
        "initial": {"kind": "tanh", "center": [0.5, 0.5], "radius": 0.3, "width": 0.08},
        "T": 5e-3, "dt": 5e-5
    }));
    let report = theta_sweep(&cfg, &[1e-1, 1e-2, 1e-3]).map_err(|e| e.to_string())?;
    let d: Vec<String> = report.rows.iter().map(|r| format!("theta={:.0e}: {:.3e}", r.theta, r.discrepancy)).collect();
    let detail = d.join(", ");
    if report.strictly_decreasing && report.monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let params = ModelParams { chi: 0.5, ..ModelParams::default() };
    let report = mms_study(&params, &[32, 64, 128]).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let parts: Vec<String> = report.studies.iter().map(|s| format!("{} {:.3}", s.name, s.min_order())).collect();
    let detail = format!("min orders: {}; {:.1} s", parts.join(", "), secs);
    if report.all_pass() && report.studies.iter().all(|s| s.min_order() >= MIN_ORDER) && secs < 180.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Verdict {
    let ode_params = ModelParams {
        sources: SourceSpec {
            b_phi: Shape::Smoothstep { x0: -1.0, y0: 0.2, x1: 1.0, y1: 1.0 },
            f_phi: Shape::ClampedLinear { x0: -1.0, y0: 0.0, x1: 1.0, y1: -0.3 },
            ..SourceSpec::zero()
        },
        ..ModelParams::default()
    };
    let ode = ode_check(&ode_params, -0.2, 1.0, 1e-3, 1e-6).map_err(|e| e.to_string())?;
    let ch_params = ModelParams { b_gradient: 1e-2, potential: PotentialSpec::truncated(), ..ModelParams::default() };
    let cross = galerkin_cross_check(&ch_params, 128, 32, 1e-4, 500, 1e-3).map_err(|e| e.to_string())?;
    let disp = dispersion_check(&ch_params, 1e-4, 128, 1e-4, 2500, 1e-2).map_err(|e| e.to_string())?;
    let detail = format!(
        "ODE |phi - phi_rk4| = {:.3e} (tol 1e-6); Galerkin max L2 = {:.3e} (tol 1e-3); dispersion rate {:.5} vs {:.5} (grid, err {:.2e}) and {:.5} (Galerkin, err {:.2e})",
        ode.error, cross.max_l2, disp.predicted, disp.grid_rate, disp.grid_rel_error, disp.galerkin_rate, disp.galerkin_rel_error
    );
    if ode.pass && cross.pass && disp.pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Largest energy-balance residual over the steps of the smooth coupled run.
fn balance_residual(variant: Variant, dt: f64) -> Result<f64, String> {
    let params = ModelParams {
        b_gradient: 1e-2,
        chi: 0.5,
        potential: PotentialSpec::truncated(),
        sources: SourceSpec::growth_apoptosis(1.0, 0.1, 0.5),
        ..ModelParams::default()
    };
    let grid = Grid2D::new(32, 32, 1.0, 1.0).unwrap();
    let phi0 = ScalarField::from_fn(&grid, |x, y| {
        0.4 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos() - 0.1
    });
    let cfg = StepConfig { dt, ch_tol: 1e-12, pressure_tol: 1e-12, nutrient_tol: 1e-12, ..StepConfig::default() };
    let init = initial_state(&params, variant, phi0, None, &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let steps = chd_core::stepper::step_count(2e-3, dt);
    let out = run(init, &cfg, &params, steps, |prev, next| {
        worst = worst.max(energy_balance_residual(prev, next, &params));
        true
    });
    match out.error {
        Some(e) => Err(e.to_string()),
        None => Ok(worst),
    }
}

fn criterion_9() -> Verdict {
    let dts = [4e-4, 2e-4, 1e-4, 5e-5];
    let mut lines = Vec::new();
    let mut ok = true;
    for variant in [Variant::DirichletQ, Variant::RobinPMuNeumann] {
        let res = dts.iter().map(|&dt| balance_residual(variant, dt)).collect::<Result<Vec<_>, _>>()?;
        let o = orders(&res);
        ok &= o.iter().all(|&x| x >= 0.9);
        let res_txt: Vec<String> = res.iter().map(|r| format!("{r:.3e}")).collect();
        lines.push(format!("{} residuals [{}] orders {:.3?}", variant.name(), res_txt.join(", "), o));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("det.json");
    let text = json!({
        "schema_version": "1.0",
        "grid": {"nx": 32, "ny": 32},
        "variant": "ROBIN_P_MU0",
        "params": base_params(0.0),
        "initial": {"kind": "random", "mean": -0.2, "amplitude": 0.05},
        "T": 2e-4, "dt": 1e-5, "seed": 1234
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&text).unwrap()).map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_chd");
    let run_into = |out: &Path| -> Result<Vec<u8>, String> {
        let status = Command::new(bin)
            .args(["run", cfg_path.to_str().unwrap(), "--quiet", "--out", out.to_str().unwrap()])
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("run exited with {status}"));
        }
        std::fs::read(out.join("diagnostics.csv")).map_err(|e| e.to_string())
    };
    let a = run_into(&dir.path().join("a"))?;
    let b = run_into(&dir.path().join("b"))?;
    let detail = format!("two runs with seed 1234: {} bytes of diagnostics each", a.len());
    if a == b && !a.is_empty() {
        Ok(format!("{detail}, identical"))
    } else {
        Err(format!("{detail}, differ"))
    }
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, check: &dyn Fn() -> Verdict| {
        let clock = Instant::now();
        let v = check();
        let secs = clock.elapsed().as_secs_f64();
        match &v {
            Ok(d) => println!("[PASS] criterion {n:>2} ({name}, {secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] criterion {n:>2} ({name}, {secs:.1} s): {d}");
            }
        }
    };
    let matrix = default_matrix();
    report(1, "comparison principle", &|| criterion_1(&matrix));
    report(2, "pure-CH energy monotonicity", &criterion_2);
    report(3, "source/flux balance", &|| criterion_3(&matrix));
    report(4, "mean-of-mu identity", &|| criterion_4(&matrix));
    report(5, "q-p reformulation", &criterion_5);
    report(6, "theta continuation", &criterion_6);
    report(7, "MMS spatial convergence", &criterion_7);
    report(8, "oracle equivalence", &criterion_8);
    report(9, "energy-balance consistency", &criterion_9);
    report(10, "determinism", &criterion_10);
    println!("acceptance: {} of 10 criteria passed in {:.0} s", 10 - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
