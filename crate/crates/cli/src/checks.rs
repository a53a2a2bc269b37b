//! Reusable property experiments shared by `verify` and the acceptance suite.

use std::f64::consts::PI;

use chd_core::diagnostics::energy;
use chd_core::model::{ConsumptionSpec, Shape, SourceSpec};
use chd_core::oracle::{cross_validate, dispersion_rate, galerkin_run, observed_rate, CrossReport, GalerkinState, GridRun1D};
use chd_core::stepper::{advance, initial_state, SimState};
use chd_core::{Grid2D, ModelParams, ScalarField, StepConfig, StepError, Variant};
use serde::Serialize;

/// Pure Cahn-Hilliard settings derived from `params`: no chemotaxis, no
/// sources, no flow. DIRICHLET_Q with zero velocity closes the chemical
/// potential by a zero-flux wall, i.e. the Neumann condition.
pub fn pure_ch_params(params: &ModelParams) -> ModelParams {
    ModelParams { chi: 0.0, sources: SourceSpec::zero(), ..params.clone() }
}

pub fn pure_ch_config(dt: f64, ch_tol: f64) -> StepConfig {
    StepConfig { dt, couple_flow: false, ch_tol, ..StepConfig::default() }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyDecay {
    pub energies: Vec<f64>,
    /// Largest `E(n+1) - E(n)` relative to `|E(0)|`.
    pub worst_increase: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Run pure CH from `phi0` and check `E(n+1) <= E(n) + tol |E(0)|` at every step.
pub fn energy_decay(phi0: ScalarField, params: &ModelParams, steps: u64, cfg: &StepConfig, tol: f64) -> Result<EnergyDecay, StepError> {
    let p = pure_ch_params(params);
    let mut state = initial_state(&p, Variant::DirichletQ, phi0, None, cfg)?;
    let mut energies = vec![energy(&state.phi, &p)];
    for _ in 0..steps {
        state = advance(&state, cfg, &p)?;
        energies.push(energy(&state.phi, &p));
    }
    let e0 = energies[0].abs().max(f64::MIN_POSITIVE);
    let worst = energies.windows(2).map(|w| (w[1] - w[0]) / e0).fold(f64::NEG_INFINITY, f64::max);
    let worst = if energies.len() < 2 { 0.0 } else { worst };
    Ok(EnergyDecay { energies, worst_increase: worst, tolerance: tol, pass: worst <= tol })
}

#[derive(Debug, Clone, Serialize)]
pub struct OdeCheck {
    pub grid_value: f64,
    pub ode_value: f64,
    /// Largest cell deviation from the ODE value at the final time.
    pub error: f64,
    /// Largest deviation of a cell from the cell mean (spatial constancy).
    pub spread: f64,
    pub pass: bool,
}

/// Spatially constant coupled run on a small grid versus the RK4 reduction.
/// Nutrient consumption and the volume source are switched off so that
/// `sigma = 1` and `v = 0` hold exactly. The gradient coefficient is raised so
/// that the constant state is linearly stable against round-off.
pub fn ode_check(params: &ModelParams, phi0: f64, t_end: f64, dt: f64, tol: f64) -> Result<OdeCheck, StepError> {
    let sources = SourceSpec { b_v: Shape::zero(), f_v: Shape::zero(), ..params.sources };
    let p = ModelParams { consumption: ConsumptionSpec::Zero, sources, b_gradient: params.b_gradient.max(0.2), ..params.clone() };
    let grid = Grid2D::new(4, 4, 1.0, 1.0).expect("valid grid");
    let cfg = StepConfig { dt, ch_tol: 1e-13, nutrient_tol: 1e-13, pressure_tol: 1e-13, ..StepConfig::default() };
    let mut state = initial_state(&p, Variant::DirichletQ, ScalarField::constant(&grid, phi0), None, &cfg)?;
    let steps = chd_core::stepper::step_count(t_end, dt);
    for _ in 0..steps {
        state = advance(&state, &cfg, &p)?;
    }
    let ode = chd_core::oracle::ode_reference(phi0, &p, t_end, dt / 10.0);
    let mean = state.phi.mean();
    let error = state.phi.values().iter().fold(0.0f64, |m, v| m.max((v - ode).abs()));
    let spread = state.phi.values().iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    Ok(OdeCheck { grid_value: mean, ode_value: ode, error, spread, pass: error <= tol })
}

/// A quasi-1D slab run of pure CH sampled every `every` steps.
pub fn slab_run(
    params: &ModelParams,
    nx: usize,
    phi0: impl Fn(f64) -> f64,
    dt: f64,
    steps: u64,
    every: u64,
    ch_tol: f64,
) -> Result<(GridRun1D, SimState), StepError> {
    let p = pure_ch_params(params);
    let grid = Grid2D::slab(nx, 3, 1.0, 1.0).expect("valid slab");
    let cfg = pure_ch_config(dt, ch_tol);
    let mut state = initial_state(&p, Variant::DirichletQ, ScalarField::from_fn(&grid, |x, _| phi0(x)), None, &cfg)?;
    let row = |s: &SimState| (0..nx).map(|i| s.phi.at(i, 0)).collect::<Vec<f64>>();
    let mut samples = vec![(0.0, row(&state))];
    for k in 1..=steps {
        state = advance(&state, &cfg, &p)?;
        if k % every.max(1) == 0 || k == steps {
            samples.push((state.t, row(&state)));
        }
    }
    Ok((GridRun1D { params: p, dt, length: 1.0, samples }, state))
}

/// Grid slab against the cosine Galerkin solver on the same smooth data.
pub fn galerkin_cross_check(params: &ModelParams, nx: usize, modes: usize, dt: f64, steps: u64, tol: f64) -> Result<CrossReport, StepError> {
    let init = |x: f64| 0.2 * (PI * x).cos() + 0.1 * (2.0 * PI * x).cos() - 0.05;
    let (grid_run, _) = slab_run(params, nx, init, dt, steps, (steps / 10).max(1), 1e-12)?;
    let galerkin = galerkin_run(GalerkinState::project(init, modes, 1.0), &grid_run.params, dt, steps as usize, (steps / 10).max(1) as usize, StepConfig::default().outer_iters);
    Ok(cross_validate(&grid_run, &galerkin, tol))
}

#[derive(Debug, Clone, Serialize)]
pub struct DispersionCheck {
    pub predicted: f64,
    pub grid_rate: f64,
    pub galerkin_rate: f64,
    pub grid_rel_error: f64,
    pub galerkin_rel_error: f64,
    pub pass: bool,
}

/// Growth rate of `amplitude cos(pi x)` against `m pi^2 (A - B pi^2)`, on a
/// grid slab and in the Galerkin space.
pub fn dispersion_check(params: &ModelParams, amplitude: f64, nx: usize, dt: f64, steps: u64, tol: f64) -> Result<DispersionCheck, StepError> {
    let p = pure_ch_params(params);
    let predicted = dispersion_rate(&p, 1, 1.0);
    let t = steps as f64 * dt;
    let init = move |x: f64| amplitude * (PI * x).cos();
    let (_, last) = slab_run(&p, nx, init, dt, steps, steps, 1e-13)?;
    let h = 1.0 / nx as f64;
    let a_t: f64 = (0..nx).map(|i| last.phi.at(i, 0) * (PI * (i as f64 + 0.5) * h).cos()).sum::<f64>() * 2.0 * h;
    let a_0: f64 = (0..nx).map(|i| init((i as f64 + 0.5) * h) * (PI * (i as f64 + 0.5) * h).cos()).sum::<f64>() * 2.0 * h;
    let grid_rate = observed_rate(a_0, a_t, t);
    let g = galerkin_run(GalerkinState::project(init, 8, 1.0), &p, dt, steps as usize, steps as usize, StepConfig::default().outer_iters);
    let last_g = &g.samples.last().expect("non-empty").1;
    let galerkin_rate = observed_rate(amplitude, last_g.phi[1], t);
    let rel = |r: f64| ((r - predicted) / predicted).abs();
    let (ge, se) = (rel(grid_rate), rel(galerkin_rate));
    Ok(DispersionCheck { predicted, grid_rate, galerkin_rate, grid_rel_error: ge, galerkin_rel_error: se, pass: ge <= tol && se <= tol })
}
