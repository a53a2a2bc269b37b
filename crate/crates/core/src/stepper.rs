//! Coupled time stepping for the Cahn-Hilliard-Darcy system with a
//! quasi-static (or theta-regularised) nutrient.
//!
//! One step runs a fixed number of Picard sweeps, each of which solves, in
//! order, the nutrient equation, one convex-split Cahn-Hilliard step, the
//! pressure equation, and reconstructs the Darcy velocity on faces.
//!
//! Discrete closures:
//! - `phi`: zero normal derivative everywhere, zero advective flux through
//!   the boundary;
//! - `mu`: combined zero total flux (DIRICHLET_Q), `mu = 0` (ROBIN_P_MU0) or
//!   zero normal derivative (ROBIN_P_MUNEUMANN);
//! - `sigma = 1` on the boundary;
//! - pressure `q = 0` (DIRICHLET_Q) or `K dp/dn = a (g - p)` (ROBIN variants).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{SolveError, StepError};
use crate::grid::{
    divergence, face_average, gradient, BcSpec, BoundaryValues, FaceVectorField, ScalarField, Side,
};
use crate::linsolve::{
    assemble_helmholtz, solve_block_ch, solve_spd, BlockOperator, Diffusivity, SolveReport,
    SolverOptions, StencilOperator,
};
use crate::model::{cutoff, ModelParams};

/// Darcy law and boundary-condition variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Pressure `q = p - (mu + chi sigma) phi` with `q = 0` and `m dmu/dn = phi v.n`.
    #[serde(rename = "DIRICHLET_Q")]
    DirichletQ,
    /// Pressure `p` with Robin condition and `mu = 0`.
    #[serde(rename = "ROBIN_P_MU0")]
    RobinPMu0,
    /// Pressure `p` with Robin condition and `dmu/dn = 0`.
    #[serde(rename = "ROBIN_P_MUNEUMANN")]
    RobinPMuNeumann,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DirichletQ, Variant::RobinPMu0, Variant::RobinPMuNeumann];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::DirichletQ => "DIRICHLET_Q",
            Variant::RobinPMu0 => "ROBIN_P_MU0",
            Variant::RobinPMuNeumann => "ROBIN_P_MUNEUMANN",
        }
    }

    /// Whether the stored pressure is `q` rather than `p`.
    pub fn uses_q(&self) -> bool {
        matches!(self, Variant::DirichletQ)
    }

    pub fn mu_bc(&self) -> BcSpec {
        match self {
            Variant::DirichletQ => BcSpec::CombinedFluxZero,
            Variant::RobinPMu0 => BcSpec::dirichlet(0.0),
            Variant::RobinPMuNeumann => BcSpec::NeumannZero,
        }
    }

    pub fn pressure_bc(&self, params: &ModelParams, t: f64) -> BcSpec {
        match self {
            Variant::DirichletQ => BcSpec::dirichlet(0.0),
            Variant::RobinPMu0 | Variant::RobinPMuNeumann => BcSpec::Robin {
                a: params.robin,
                k: params.permeability,
                g: BoundaryValues::Constant(params.g.at(t)),
            },
        }
    }

    /// The Neumann chemical-potential variant needs a potential with bounded
    /// second derivative.
    pub fn check_potential(&self, params: &ModelParams) -> Result<(), StepError> {
        if *self == Variant::RobinPMuNeumann && !params.potential.has_bounded_curvature() {
            return Err(StepError::QuadraticGrowthRequired);
        }
        Ok(())
    }
}

/// Nutrient boundary condition `sigma = 1`.
pub fn sigma_bc() -> BcSpec {
    BcSpec::dirichlet(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub dt: f64,
    pub outer_iters: usize,
    pub use_cutoff: bool,
    /// When false the Darcy subsystem is skipped and `v = 0` (pure Cahn-Hilliard).
    pub couple_flow: bool,
    pub nutrient_tol: f64,
    pub pressure_tol: f64,
    pub ch_tol: f64,
    pub max_iter: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            dt: 1e-5,
            outer_iters: 2,
            use_cutoff: true,
            couple_flow: true,
            nutrient_tol: 1e-10,
            pressure_tol: 1e-10,
            ch_tol: 1e-8,
            max_iter: 20_000,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<(), StepError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(StepError::BadTimeStep(self.dt));
        }
        if self.outer_iters == 0 {
            return Err(StepError::NoOuterIterations);
        }
        Ok(())
    }
}

/// Terms actually applied by the step that produced a state; the discrete
/// energy balance is evaluated against these.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTransport {
    /// Advective flux `phi_upwind v` of the final sweep (zero on boundary faces).
    pub advective_flux: FaceVectorField,
    /// Mass source `Gamma_phi` applied in the final sweep.
    pub gamma_phi: ScalarField,
    /// Face mobility used by the diffusion operator.
    pub mobility: FaceVectorField,
    /// Boundary diffusive flux `m dmu/dn` per boundary face, W/E/S/N order.
    pub boundary_mu_flux: Vec<f64>,
    /// Time-discrete `Psi'` used by the chemical-potential equation.
    pub potential_derivative: ScalarField,
    /// Discrete L2 change of `phi` in the last Picard sweep.
    pub coupling_change: f64,
    pub use_cutoff: bool,
    pub nutrient_iterations: usize,
    pub ch_iterations: usize,
    pub pressure_iterations: usize,
}

/// Immutable snapshot of the simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub step: u64,
    pub phi: ScalarField,
    pub mu: ScalarField,
    pub sigma: ScalarField,
    pub v: FaceVectorField,
    /// `q` for DIRICHLET_Q, `p` otherwise.
    pub pressure: ScalarField,
    pub variant: Variant,
    pub transport: Option<Arc<StepTransport>>,
}

/// Fields of `Gamma_v` and `Gamma_phi`.
pub fn source_fields(
    params: &ModelParams,
    phi: &ScalarField,
    sigma: &ScalarField,
    use_cutoff: bool,
) -> (ScalarField, ScalarField) {
    let mut gv = ScalarField::zeros(phi.grid());
    let mut gp = ScalarField::zeros(phi.grid());
    for (k, (&p, &s)) in phi.values().iter().zip(sigma.values()).enumerate() {
        let (a, b) = params.sources.eval(p, s, use_cutoff);
        gv.values_mut()[k] = a;
        gp.values_mut()[k] = b;
    }
    (gv, gp)
}

/// Discrete chemical potential for a given `phi` with `dphi/dn = 0`:
/// `A Psi'(phi) - B lap(phi) - chi sigma`.
pub fn chemical_potential(params: &ModelParams, phi: &ScalarField, sigma: &ScalarField) -> ScalarField {
    let lap = crate::grid::laplacian(phi, &BcSpec::NeumannZero);
    let mut mu = ScalarField::zeros(phi.grid());
    for k in 0..mu.values().len() {
        let p = phi.values()[k];
        mu.values_mut()[k] = params.a_energy * params.potential(p).dpsi
            - params.b_gradient * lap.values()[k]
            - params.chi * sigma.values()[k];
    }
    mu
}

/// Solve `(theta/dt + h(phi)) sigma - lap(sigma) = (theta/dt) sigma_prev + forcing`, `sigma = 1` on the boundary.
pub fn solve_nutrient(
    params: &ModelParams,
    phi: &ScalarField,
    sigma_prev: &ScalarField,
    dt: f64,
    forcing: Option<&ScalarField>,
    opts: SolverOptions,
) -> Result<(ScalarField, SolveReport), SolveError> {
    let theta = params.theta;
    let relax = if theta > 0.0 { theta / dt } else { 0.0 };
    let c0 = phi.map(|p| relax + params.consumption(p));
    let op = assemble_helmholtz(&c0, &Diffusivity::Uniform(1.0), &sigma_bc())?;
    let mut rhs = sigma_prev.scale(relax);
    if let Some(f) = forcing {
        rhs = &rhs + f;
    }
    let (sigma, rep) = solve_spd(&op, &rhs, Some(sigma_prev), opts);
    if !rep.converged {
        return Err(SolveError::NotConverged { iterations: rep.iterations, residual: rep.residual });
    }
    Ok((sigma, rep))
}

/// Non-pressure part of the Darcy flux, so that `v = -K grad(P) + korteweg`.
///
/// DIRICHLET_Q: `-K phi grad(mu + chi sigma)`; on boundary faces only the
/// nutrient part `-K phi chi dsigma/dn` is kept (the diffusive `mu` flux is
/// closed by the combined-flux condition). ROBIN variants:
/// `K (mu + chi sigma) grad(phi)`, zero on the boundary since `dphi/dn = 0`.
pub fn korteweg_flux(
    params: &ModelParams,
    variant: Variant,
    phi: &ScalarField,
    mu: &ScalarField,
    sigma: &ScalarField,
) -> FaceVectorField {
    let grid = phi.grid();
    let k = params.permeability;
    let w = mu.zip_map(sigma, |m, s| m + params.chi * s);
    match variant {
        Variant::DirichletQ => {
            let phi_f = face_average(phi);
            let mut gw = gradient(&w, &BcSpec::NeumannZero);
            let sbc = sigma_bc();
            for side in Side::ALL {
                for j in 0..grid.side_len(side) {
                    let c = grid.side_cell(side, j);
                    let ds = sbc.normal_derivative(grid, side, j, sigma.values()[c]);
                    gw.set_normal(side, j, params.chi * ds);
                }
            }
            phi_f.map2(&gw, |p, g| -k * p * g)
        }
        Variant::RobinPMu0 | Variant::RobinPMuNeumann => {
            let w_f = face_average(&w);
            let gp = gradient(phi, &BcSpec::NeumannZero);
            w_f.map2(&gp, |w, g| k * w * g)
        }
    }
}

/// Extra data for manufactured-solution studies of the pressure equation.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureForcing {
    /// Added to the right-hand side.
    pub volume: ScalarField,
    /// Replaces the uniform Robin datum `g` (ignored for DIRICHLET_Q).
    pub robin_data: Option<BoundaryValues>,
}

/// Solve the pressure equation `-K lap(P) = Gamma_v - div(korteweg) + forcing`.
#[allow(clippy::too_many_arguments)]
pub fn solve_pressure(
    params: &ModelParams,
    variant: Variant,
    phi: &ScalarField,
    mu: &ScalarField,
    sigma: &ScalarField,
    t: f64,
    use_cutoff: bool,
    guess: Option<&ScalarField>,
    forcing: Option<&PressureForcing>,
    opts: SolverOptions,
) -> Result<(ScalarField, SolveReport), SolveError> {
    let grid = phi.grid();
    let (gamma_v, _) = source_fields(params, phi, sigma, use_cutoff);
    let kort = korteweg_flux(params, variant, phi, mu, sigma);
    let mut rhs = &gamma_v - &divergence(&kort);
    let mut bc = variant.pressure_bc(params, t);
    if let Some(f) = forcing {
        rhs = &rhs + &f.volume;
        if let (Some(data), BcSpec::Robin { g, .. }) = (&f.robin_data, &mut bc) {
            *g = data.clone();
        }
    }
    let op = assemble_helmholtz(&ScalarField::zeros(grid), &Diffusivity::Uniform(params.permeability), &bc)?;
    let (p, rep) = solve_spd(&op, &rhs, guess, opts);
    if !rep.converged {
        return Err(SolveError::NotConverged { iterations: rep.iterations, residual: rep.residual });
    }
    Ok((p, rep))
}

/// Face velocity `v = -K grad(P) + korteweg` with the pressure closure of the variant.
pub fn reconstruct_velocity(
    params: &ModelParams,
    variant: Variant,
    phi: &ScalarField,
    mu: &ScalarField,
    sigma: &ScalarField,
    pressure: &ScalarField,
    t: f64,
) -> FaceVectorField {
    let k = params.permeability;
    let gp = gradient(pressure, &variant.pressure_bc(params, t));
    let kort = korteweg_flux(params, variant, phi, mu, sigma);
    gp.map2(&kort, |g, c| -k * g + c)
}

/// `p = q + (mu + chi sigma) phi`.
pub fn p_from_q(params: &ModelParams, q: &ScalarField, phi: &ScalarField, mu: &ScalarField, sigma: &ScalarField) -> ScalarField {
    let mut p = q.clone();
    for k in 0..p.values().len() {
        p.values_mut()[k] += (mu.values()[k] + params.chi * sigma.values()[k]) * phi.values()[k];
    }
    p
}

/// `q = p - (mu + chi sigma) phi`.
pub fn q_from_p(params: &ModelParams, p: &ScalarField, phi: &ScalarField, mu: &ScalarField, sigma: &ScalarField) -> ScalarField {
    let mut q = p.clone();
    for k in 0..q.values().len() {
        q.values_mut()[k] -= (mu.values()[k] + params.chi * sigma.values()[k]) * phi.values()[k];
    }
    q
}

/// Largest per-face advective Courant number `dt |v| / h`.
pub fn cfl_number(v: &FaceVectorField, dt: f64) -> f64 {
    let g = v.grid();
    let cx = v.x.iter().fold(0.0f64, |m, a| m.max(a.abs())) / g.hx();
    let cy = v.y.iter().fold(0.0f64, |m, a| m.max(a.abs())) / g.hy();
    dt * cx.max(cy)
}

/// Upwinded `phi v` on interior faces, zero on boundary faces.
pub fn upwind_flux(phi: &ScalarField, v: &FaceVectorField) -> FaceVectorField {
    let g = phi.grid();
    let mut f = FaceVectorField::zeros(g);
    for j in 0..g.ny() {
        for i in 1..g.nx() {
            let k = g.xf(i, j);
            let vel = v.x[k];
            let up = if vel >= 0.0 { phi.at(i - 1, j) } else { phi.at(i, j) };
            f.x[k] = vel * up;
        }
    }
    for j in 1..g.ny() {
        for i in 0..g.nx() {
            let k = g.yf(i, j);
            let vel = v.y[k];
            let up = if vel >= 0.0 { phi.at(i, j - 1) } else { phi.at(i, j) };
            f.y[k] = vel * up;
        }
    }
    f
}

/// Inputs of one linearised convex-split Cahn-Hilliard solve.
#[derive(Debug, Clone, Copy)]
pub struct ChStep<'a> {
    pub params: &'a ModelParams,
    pub variant: Variant,
    pub phi_old: &'a ScalarField,
    /// Point about which the convex part of the potential is linearised.
    pub phi_lin: &'a ScalarField,
    /// Point at which `Gamma_phi` is evaluated.
    pub phi_src: &'a ScalarField,
    pub sigma: &'a ScalarField,
    pub v: &'a FaceVectorField,
    pub dt: f64,
    pub use_cutoff: bool,
    pub mu_guess: Option<&'a ScalarField>,
    /// Extra source in the `phi` equation (manufactured solutions).
    pub mass_forcing: Option<&'a ScalarField>,
    pub opts: SolverOptions,
}

/// Result of [`step_cahn_hilliard`].
#[derive(Debug, Clone)]
pub struct ChOutcome {
    pub phi: ScalarField,
    pub mu: ScalarField,
    pub advective_flux: FaceVectorField,
    pub gamma_phi: ScalarField,
    pub mobility: FaceVectorField,
    pub boundary_mu_flux: Vec<f64>,
    /// Time-discrete `Psi'` of the step: `mu = A psi_d - B lap(phi) - chi sigma`.
    pub potential_derivative: ScalarField,
    pub report: SolveReport,
}

/// One convex-split step:
///
/// `(phi - phi_old)/dt + div(phi_old v)_upwind = div(m(phi_old) grad mu) + Gamma_phi`,
/// `mu = A (Psi_c'(phi*) + Psi_c''(phi*)(phi - phi*) - phi_old) - B lap(phi) - chi sigma`,
///
/// with `Psi_c(s) = Psi(s) + s^2/2` convex and `-s^2/2` the explicit concave part.
pub fn step_cahn_hilliard(input: ChStep<'_>) -> Result<ChOutcome, StepError> {
    let ChStep { params, variant, phi_old, phi_lin, phi_src, sigma, v, dt, .. } = input;
    let grid = phi_old.grid();
    let cfl = cfl_number(v, dt);
    if cfl > 2.0 {
        return Err(StepError::Cfl { cfl });
    }
    let (a, b, chi) = (params.a_energy, params.b_gradient, params.chi);
    let advective_flux = upwind_flux(phi_old, v);
    let mut gamma_phi = ScalarField::zeros(grid);
    for k in 0..gamma_phi.values().len() {
        gamma_phi.values_mut()[k] =
            params.sources.eval(phi_src.values()[k], sigma.values()[k], input.use_cutoff).1;
    }
    let mob = phi_old.map(|p| params.mobility(p));
    let mobility = face_average(&mob);
    let mu_bc = variant.mu_bc();
    let diffusion = assemble_helmholtz(&ScalarField::zeros(grid), &Diffusivity::Faces(mobility.clone()), &mu_bc)
        .map_err(StepError::solve("cahn-hilliard"))?;
    let curvature = phi_lin.map(|p| params.potential(p).ddpsi + 1.0);
    let stiffness = assemble_helmholtz(&curvature.scale(a), &Diffusivity::Uniform(b), &BcSpec::NeumannZero)
        .map_err(StepError::solve("cahn-hilliard"))?;

    let div_adv = divergence(&advective_flux);
    let mut rhs_phi = ScalarField::zeros(grid);
    let mut rhs_mu = ScalarField::zeros(grid);
    let mut explicit_mu = ScalarField::zeros(grid);
    let mut explicit_psi = ScalarField::zeros(grid);
    for k in 0..grid.cells() {
        let mut src = gamma_phi.values()[k] - div_adv.values()[k] + diffusion.affine[k];
        if let Some(f) = input.mass_forcing {
            src += f.values()[k];
        }
        rhs_phi.values_mut()[k] = phi_old.values()[k] + dt * src;
        let pl = phi_lin.values()[k];
        let pot = params.potential(pl);
        let c = curvature.values()[k];
        let psi_e = pot.dpsi + pl - c * pl - phi_old.values()[k];
        explicit_psi.values_mut()[k] = psi_e;
        let e = a * psi_e - chi * sigma.values()[k];
        explicit_mu.values_mut()[k] = e;
        rhs_mu.values_mut()[k] = e + stiffness.affine[k];
    }
    let id = StencilOperator::identity(grid);
    let block = BlockOperator {
        a11: id.clone(),
        a12: diffusion.clone().scaled(dt),
        a21: stiffness.clone().scaled(-1.0),
        a22: id,
    };
    let guess_mu = input.mu_guess.cloned().unwrap_or_else(|| ScalarField::zeros(grid));
    let (phi, _, report) = solve_block_ch(&block, &rhs_phi, &rhs_mu, Some((phi_lin, &guess_mu)), input.opts)
        .map_err(StepError::solve("cahn-hilliard"))?;
    // mu from its defining relation, so the chemical-potential equation holds exactly
    let mut mu = stiffness.apply_affine(&phi);
    mu.values_mut().iter_mut().zip(explicit_mu.values()).for_each(|(m, e)| *m += e);
    // phi equation was posed with mu from the block solve; use the recomputed mu for the flux record
    let mut boundary_mu_flux = Vec::with_capacity(grid.boundary_faces());
    for side in Side::ALL {
        for j in 0..grid.side_len(side) {
            let c = grid.side_cell(side, j);
            let f = grid.side_face(side, j);
            let m = match side {
                Side::West | Side::East => mobility.x[f],
                Side::South | Side::North => mobility.y[f],
            };
            boundary_mu_flux.push(m * mu_bc.normal_derivative(grid, side, j, mu.values()[c]));
        }
    }
    if !phi.is_finite() || !mu.is_finite() {
        return Err(StepError::NonFinite("phi/mu"));
    }
    let potential_derivative = explicit_psi.zip_map(&(&curvature * &phi), |e, cp| e + cp);
    Ok(ChOutcome { phi, mu, advective_flux, gamma_phi, mobility, boundary_mu_flux, potential_derivative, report })
}

fn solver(tol: f64, cfg: &StepConfig) -> SolverOptions {
    SolverOptions::new(tol, cfg.max_iter)
}

/// Initial state: nutrient (quasi-static unless `sigma0` is given), chemical
/// potential from `phi0`, then one pressure solve.
pub fn initial_state(
    params: &ModelParams,
    variant: Variant,
    phi0: ScalarField,
    sigma0: Option<ScalarField>,
    cfg: &StepConfig,
) -> Result<SimState, StepError> {
    params.validate()?;
    variant.check_potential(params)?;
    cfg.validate()?;
    let grid = *phi0.grid();
    let sigma = match sigma0 {
        Some(s) => s,
        None => {
            let quasi = ModelParams { theta: 0.0, ..params.clone() };
            let one = ScalarField::constant(&grid, 1.0);
            solve_nutrient(&quasi, &phi0, &one, cfg.dt, None, solver(cfg.nutrient_tol, cfg))
                .map_err(StepError::solve("nutrient"))?
                .0
        }
    };
    let mu = chemical_potential(params, &phi0, &sigma);
    let (pressure, v) = if cfg.couple_flow {
        let (p, _) = solve_pressure(params, variant, &phi0, &mu, &sigma, 0.0, cfg.use_cutoff, None, None, solver(cfg.pressure_tol, cfg))
            .map_err(StepError::solve("pressure"))?;
        let v = reconstruct_velocity(params, variant, &phi0, &mu, &sigma, &p, 0.0);
        (p, v)
    } else {
        (ScalarField::zeros(&grid), FaceVectorField::zeros(&grid))
    };
    Ok(SimState { t: 0.0, step: 0, phi: phi0, mu, sigma, v, pressure, variant, transport: None })
}

/// Lower/upper slack of the discrete comparison principle.
pub const SIGMA_SLACK: f64 = 1e-8;

/// Advance one step of size `cfg.dt`; on error the input state is untouched.
pub fn advance(state: &SimState, cfg: &StepConfig, params: &ModelParams) -> Result<SimState, StepError> {
    cfg.validate()?;
    let variant = state.variant;
    variant.check_potential(params)?;
    let dt = cfg.dt;
    let step = state.step + 1;
    let t_new = step as f64 * dt;
    let mut phi_it = state.phi.clone();
    let mut mu_it = state.mu.clone();
    let mut sigma_it = state.sigma.clone();
    let mut v_it = state.v.clone();
    let mut p_it = state.pressure.clone();
    let mut last: Option<ChOutcome> = None;
    let mut change = 0.0;
    let (mut n_it, mut c_it, mut p_iters) = (0, 0, 0);
    for _ in 0..cfg.outer_iters {
        let (sigma, rep) = solve_nutrient(params, &phi_it, &state.sigma, dt, None, solver(cfg.nutrient_tol, cfg))
            .map_err(StepError::solve("nutrient"))?;
        n_it += rep.iterations;
        sigma_it = sigma;
        let phi_src = state.phi.zip_map(&phi_it, |a, b| 0.5 * (a + b));
        let out = step_cahn_hilliard(ChStep {
            params,
            variant,
            phi_old: &state.phi,
            phi_lin: &phi_it,
            phi_src: &phi_src,
            sigma: &sigma_it,
            v: &v_it,
            dt,
            use_cutoff: cfg.use_cutoff,
            mu_guess: Some(&mu_it),
            mass_forcing: None,
            opts: solver(cfg.ch_tol, cfg),
        })?;
        c_it += out.report.iterations;
        change = (&out.phi - &phi_it).l2_norm();
        phi_it = out.phi.clone();
        mu_it = out.mu.clone();
        if cfg.couple_flow {
            let (p, rep) = solve_pressure(params, variant, &phi_it, &mu_it, &sigma_it, t_new, cfg.use_cutoff, Some(&p_it), None, solver(cfg.pressure_tol, cfg))
                .map_err(StepError::solve("pressure"))?;
            p_iters += rep.iterations;
            p_it = p;
            v_it = reconstruct_velocity(params, variant, &phi_it, &mu_it, &sigma_it, &p_it, t_new);
        }
        last = Some(out);
    }
    let out = last.expect("outer_iters >= 1");
    let (smin, smax) = (sigma_it.min(), sigma_it.max());
    if smin < -SIGMA_SLACK || smax > 1.0 + SIGMA_SLACK {
        return Err(StepError::ComparisonPrinciple { min: smin, max: smax });
    }
    if !p_it.is_finite() || !v_it.is_finite() || !sigma_it.is_finite() {
        return Err(StepError::NonFinite("sigma/pressure/velocity"));
    }
    let transport = StepTransport {
        advective_flux: out.advective_flux,
        gamma_phi: out.gamma_phi,
        mobility: out.mobility,
        boundary_mu_flux: out.boundary_mu_flux,
        potential_derivative: out.potential_derivative,
        coupling_change: change,
        use_cutoff: cfg.use_cutoff,
        nutrient_iterations: n_it,
        ch_iterations: c_it,
        pressure_iterations: p_iters,
    };
    Ok(SimState {
        t: t_new,
        step,
        phi: phi_it,
        mu: mu_it,
        sigma: sigma_it,
        v: v_it,
        pressure: p_it,
        variant,
        transport: Some(Arc::new(transport)),
    })
}

/// Clamp helper used by initial-condition builders.
pub fn clamp_unit(f: &ScalarField) -> ScalarField {
    f.map(cutoff)
}

/// Number of steps of size `dt` that reach `t_end` (zero for `t_end <= 0`).
pub fn step_count(t_end: f64, dt: f64) -> u64 {
    if t_end <= 0.0 {
        0
    } else {
        (t_end / dt).round() as u64
    }
}

/// Outcome of [`run`]: the last accepted state and the error that stopped the
/// loop early, if any.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub last: SimState,
    pub error: Option<StepError>,
}

/// Advance until `state.step == last_step`, calling `observe(prev, next)`
/// after every accepted step. Returning `false` from `observe` stops the loop.
pub fn run(
    initial: SimState,
    cfg: &StepConfig,
    params: &ModelParams,
    last_step: u64,
    mut observe: impl FnMut(&SimState, &SimState) -> bool,
) -> RunOutcome {
    let mut state = initial;
    while state.step < last_step {
        match advance(&state, cfg, params) {
            Ok(next) => {
                let go_on = observe(&state, &next);
                state = next;
                if !go_on {
                    break;
                }
            }
            Err(e) => return RunOutcome { last: state, error: Some(e) },
        }
    }
    RunOutcome { last: state, error: None }
}

/// Run and keep every `every`-th state (plus the initial and the last one).
pub fn run_trajectory(
    initial: SimState,
    cfg: &StepConfig,
    params: &ModelParams,
    last_step: u64,
    every: u64,
) -> Result<Vec<SimState>, (Vec<SimState>, StepError)> {
    let every = every.max(1);
    let mut traj = vec![initial.clone()];
    let out = run(initial, cfg, params, last_step, |_, next| {
        if next.step % every == 0 || next.step == last_step {
            traj.push(next.clone());
        }
        true
    });
    match out.error {
        None => Ok(traj),
        Some(e) => Err((traj, e)),
    }
}
