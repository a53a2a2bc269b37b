//! Manufactured-solution studies of the spatial operators on the unit square.
//!
//! Every study picks smooth trigonometric fields compatible with the boundary
//! conditions of the operator under test, adds the analytic residual as a
//! forcing, and measures the discrete L2 error at cell centres under grid
//! doubling.

use std::f64::consts::PI;

use chd_core::diagnostics::q_p_velocities;
use chd_core::grid::{BoundaryValues, Side};
use chd_core::linsolve::SolverOptions;
use chd_core::stepper::{solve_nutrient, solve_pressure, step_cahn_hilliard, source_fields, ChStep, PressureForcing};
use chd_core::{FaceVectorField, Grid2D, ModelParams, ScalarField, StepError, Variant};
use serde::Serialize;

/// Grid levels of the default study.
pub const DEFAULT_LEVELS: [usize; 3] = [32, 64, 128];

/// Smallest acceptable observed order.
pub const MIN_ORDER: f64 = 1.8;

const TOL: f64 = 1e-12;
const MAX_ITER: usize = 50_000;

/// A smooth function together with its gradient and Laplacian.
#[derive(Clone, Copy)]
struct Exact {
    value: f64,
    dx: f64,
    dy: f64,
    lap: f64,
}

fn trig(x: f64, y: f64) -> (f64, f64, f64, f64) {
    ((PI * x).sin(), (PI * x).cos(), (PI * y).sin(), (PI * y).cos())
}

/// `phi = 0.5 cos(pi x) cos(pi y)`, zero normal derivative on the boundary.
fn phi_exact(x: f64, y: f64) -> Exact {
    let (s, c, sy, cy) = trig(x, y);
    Exact { value: 0.5 * c * cy, dx: -0.5 * PI * s * cy, dy: -0.5 * PI * c * sy, lap: -PI * PI * c * cy }
}

/// `mu = cos(pi x) cos(pi y)`.
fn mu_exact(x: f64, y: f64) -> Exact {
    let (s, c, sy, cy) = trig(x, y);
    Exact { value: c * cy, dx: -PI * s * cy, dy: -PI * c * sy, lap: -2.0 * PI * PI * c * cy }
}

/// `sigma = 1 - 0.3 sin^2(pi x) sin^2(pi y)`: equal to one with zero normal
/// derivative on the boundary.
fn sigma_exact(x: f64, y: f64) -> Exact {
    let (s, c, sy, cy) = trig(x, y);
    let pi2 = PI * PI;
    Exact {
        value: 1.0 - 0.3 * s * s * sy * sy,
        dx: -0.6 * PI * s * c * sy * sy,
        dy: -0.6 * PI * s * s * sy * cy,
        lap: -0.6 * pi2 * ((c * c - s * s) * sy * sy + s * s * (cy * cy - sy * sy)),
    }
}

/// `q = sin(pi x) sin(pi y)`, zero on the boundary.
fn q_exact(x: f64, y: f64) -> Exact {
    let (s, c, sy, cy) = trig(x, y);
    Exact { value: s * sy, dx: PI * c * sy, dy: PI * s * cy, lap: -2.0 * PI * PI * s * sy }
}

/// `p = cos(pi x) cos(pi y) + xy/2`, generic Robin data.
fn p_exact(x: f64, y: f64) -> Exact {
    let (s, c, sy, cy) = trig(x, y);
    Exact { value: c * cy + 0.5 * x * y, dx: -PI * s * cy + 0.5 * y, dy: -PI * c * sy + 0.5 * x, lap: -2.0 * PI * PI * c * cy }
}

fn sample(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> ScalarField {
    ScalarField::from_fn(grid, f)
}

/// Central difference used for third derivatives of the potential and the
/// mobility slope; both are polynomial in the sampled range.
fn derivative(f: impl Fn(f64) -> f64, s: f64) -> f64 {
    let h = 1e-4;
    (f(s + h) - f(s - h)) / (2.0 * h)
}

#[derive(Debug, Clone, Serialize)]
pub struct Study {
    pub name: String,
    pub levels: Vec<usize>,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
    pub pass: bool,
}

impl Study {
    fn from_errors(name: &str, levels: &[usize], errors: Vec<f64>) -> Study {
        let orders: Vec<f64> = errors
            .windows(2)
            .zip(levels.windows(2))
            .map(|(e, n)| (e[0] / e[1]).ln() / (n[1] as f64 / n[0] as f64).ln())
            .collect();
        let pass = !orders.is_empty() && orders.iter().all(|o| *o >= MIN_ORDER);
        Study { name: name.to_string(), levels: levels.to_vec(), errors, orders, pass }
    }

    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MmsReport {
    pub studies: Vec<Study>,
    /// Largest interior q/p velocity discrepancy over the velocity study levels.
    pub q_p_discrepancy: f64,
}

impl MmsReport {
    pub fn all_pass(&self) -> bool {
        self.studies.iter().all(|s| s.pass)
    }
}

fn unit_grid(n: usize) -> Grid2D {
    Grid2D::new(n, n, 1.0, 1.0).expect("level >= 3")
}

fn opts() -> SolverOptions {
    SolverOptions::new(TOL, MAX_ITER)
}

/// Quasi-static nutrient: `h(phi) sigma - lap(sigma) = f`, `sigma = 1` on the boundary.
pub fn nutrient_error(params: &ModelParams, n: usize) -> Result<f64, StepError> {
    let grid = unit_grid(n);
    let p = ModelParams { theta: 0.0, ..params.clone() };
    let phi = sample(&grid, |x, y| phi_exact(x, y).value);
    let exact = sample(&grid, |x, y| sigma_exact(x, y).value);
    let forcing = sample(&grid, |x, y| {
        let s = sigma_exact(x, y);
        p.consumption(phi_exact(x, y).value) * s.value - s.lap
    });
    let (sigma, _) = solve_nutrient(&p, &phi, &exact, 1.0, Some(&forcing), opts()).map_err(|e| StepError::Solve {
        stage: "nutrient",
        source: e,
    })?;
    Ok((&sigma - &exact).l2_norm())
}

/// Pressure equation of `variant` with manufactured pressure, phase field,
/// chemical potential and nutrient.
pub fn pressure_error(params: &ModelParams, variant: Variant, n: usize) -> Result<f64, StepError> {
    let grid = unit_grid(n);
    let k = params.permeability;
    let chi = params.chi;
    let phi = sample(&grid, |x, y| phi_exact(x, y).value);
    let mu = sample(&grid, |x, y| mu_exact(x, y).value);
    let sigma = sample(&grid, |x, y| sigma_exact(x, y).value);
    let (gamma_v, _) = source_fields(params, &phi, &sigma, true);
    let exact_fn = |x: f64, y: f64| if variant.uses_q() { q_exact(x, y) } else { p_exact(x, y) };
    // continuum right-hand side without Gamma_v: K div(phi grad w) for the
    // q-form, -K div(w grad phi) for the p-form
    let drive = sample(&grid, |x, y| {
        let (f, m, s) = (phi_exact(x, y), mu_exact(x, y), sigma_exact(x, y));
        let (wx, wy, wlap) = (m.dx + chi * s.dx, m.dy + chi * s.dy, m.lap + chi * s.lap);
        let w = m.value + chi * s.value;
        let pr = exact_fn(x, y);
        if variant.uses_q() {
            -k * pr.lap - k * (f.dx * wx + f.dy * wy + f.value * wlap)
        } else {
            -k * pr.lap + k * (wx * f.dx + wy * f.dy + w * f.lap)
        }
    });
    let volume = &drive - &gamma_v;
    let robin_data = (!variant.uses_q()).then(|| robin_datum(&grid, params, p_exact));
    let forcing = PressureForcing { volume, robin_data };
    let (pressure, _) = solve_pressure(params, variant, &phi, &mu, &sigma, 0.0, true, None, Some(&forcing), opts())
        .map_err(|e| StepError::Solve { stage: "pressure", source: e })?;
    let exact = sample(&grid, |x, y| exact_fn(x, y).value);
    Ok((&pressure - &exact).l2_norm())
}

/// `g = p + (K / a) dp/dn` at boundary face midpoints.
fn robin_datum(grid: &Grid2D, params: &ModelParams, exact: fn(f64, f64) -> Exact) -> BoundaryValues {
    let mut values = Vec::with_capacity(grid.boundary_faces());
    for side in Side::ALL {
        for j in 0..grid.side_len(side) {
            let (x, y) = grid.side_point(side, j);
            let e = exact(x, y);
            let dn = match side {
                Side::West | Side::East => side.outward() * e.dx,
                Side::South | Side::North => side.outward() * e.dy,
            };
            values.push(e.value + params.permeability / params.robin * dn);
        }
    }
    BoundaryValues::PerFace(values)
}

/// One convex-split Cahn-Hilliard solve from `phi_old = phi_e` with zero
/// velocity, forced so that `phi_e` and `mu_e = A Psi'(phi_e) - B lap(phi_e) -
/// chi sigma_e` solve it exactly. Returns `|phi - phi_e| / dt + |mu - mu_e|`.
pub fn cahn_hilliard_error(params: &ModelParams, n: usize, dt: f64) -> Result<f64, StepError> {
    let grid = unit_grid(n);
    let p = ModelParams { sources: chd_core::model::SourceSpec::zero(), ..params.clone() };
    let (a, b, chi) = (p.a_energy, p.b_gradient, p.chi);
    let mu_e = |x: f64, y: f64| {
        let f = phi_exact(x, y);
        a * p.potential(f.value).dpsi - b * f.lap - chi * sigma_exact(x, y).value
    };
    let forcing = sample(&grid, |x, y| {
        let (f, s) = (phi_exact(x, y), sigma_exact(x, y));
        let ddpsi = p.potential(f.value).ddpsi;
        let dddpsi = derivative(|u| p.potential(u).ddpsi, f.value);
        // lap(phi) = -2 pi^2 phi, so grad(mu) = (A Psi'' + 2 pi^2 B) grad(phi) - chi grad(sigma)
        let slope = a * ddpsi + 2.0 * PI * PI * b;
        let (mx, my) = (slope * f.dx - chi * s.dx, slope * f.dy - chi * s.dy);
        let grad2 = f.dx * f.dx + f.dy * f.dy;
        let mu_lap = a * dddpsi * grad2 + slope * f.lap - chi * s.lap;
        let m = p.mobility(f.value);
        let dm = derivative(|u| p.mobility(u), f.value);
        -(dm * (f.dx * mx + f.dy * my) + m * mu_lap)
    });
    let phi_old = sample(&grid, |x, y| phi_exact(x, y).value);
    let sigma = sample(&grid, |x, y| sigma_exact(x, y).value);
    let v = FaceVectorField::zeros(&grid);
    let out = step_cahn_hilliard(ChStep {
        params: &p,
        variant: Variant::DirichletQ,
        phi_old: &phi_old,
        phi_lin: &phi_old,
        phi_src: &phi_old,
        sigma: &sigma,
        v: &v,
        dt,
        use_cutoff: true,
        mu_guess: None,
        mass_forcing: Some(&forcing),
        opts: opts(),
    })?;
    let mu_exact_field = sample(&grid, mu_e);
    Ok((&out.phi - &phi_old).l2_norm() / dt + (&out.mu - &mu_exact_field).l2_norm())
}

/// Interior-face velocity errors of the q-form and the p-form against the
/// analytic Darcy velocity, and their mutual discrepancy.
pub fn velocity_errors(params: &ModelParams, n: usize) -> (f64, f64, f64) {
    let grid = unit_grid(n);
    let (k, chi) = (params.permeability, params.chi);
    let phi = sample(&grid, |x, y| phi_exact(x, y).value);
    let mu = sample(&grid, |x, y| mu_exact(x, y).value);
    let sigma = sample(&grid, |x, y| sigma_exact(x, y).value);
    let q = sample(&grid, |x, y| q_exact(x, y).value);
    let (vq, vp) = q_p_velocities(params, &phi, &mu, &sigma, &q);
    let exact = |x: f64, y: f64| {
        let (f, m, s, qq) = (phi_exact(x, y), mu_exact(x, y), sigma_exact(x, y), q_exact(x, y));
        (
            -k * (qq.dx + f.value * (m.dx + chi * s.dx)),
            -k * (qq.dy + f.value * (m.dy + chi * s.dy)),
        )
    };
    let (hx, hy) = (grid.hx(), grid.hy());
    let (mut eq, mut ep, mut dqp) = (0.0f64, 0.0f64, 0.0f64);
    let mut acc = |a: f64, b: f64, e: f64| {
        eq += (a - e).powi(2) * hx * hy;
        ep += (b - e).powi(2) * hx * hy;
        dqp = dqp.max((a - b).abs());
    };
    for j in 0..grid.ny() {
        for i in 1..grid.nx() {
            let f = grid.xf(i, j);
            acc(vq.x[f], vp.x[f], exact(i as f64 * hx, (j as f64 + 0.5) * hy).0);
        }
    }
    for j in 1..grid.ny() {
        for i in 0..grid.nx() {
            let f = grid.yf(i, j);
            acc(vq.y[f], vp.y[f], exact((i as f64 + 0.5) * hx, j as f64 * hy).1);
        }
    }
    (eq.sqrt(), ep.sqrt(), dqp)
}

/// The full study: nutrient, both pressure forms, the CH operator and the
/// q/p velocity reformulation.
pub fn mms_study(params: &ModelParams, levels: &[usize]) -> Result<MmsReport, StepError> {
    let ch_dt = 1e-3;
    let mut nutrient = Vec::new();
    let mut dq = Vec::new();
    let mut rp = Vec::new();
    let mut ch = Vec::new();
    let mut vq = Vec::new();
    let mut vp = Vec::new();
    let mut disc = 0.0f64;
    for &n in levels {
        nutrient.push(nutrient_error(params, n)?);
        dq.push(pressure_error(params, Variant::DirichletQ, n)?);
        rp.push(pressure_error(params, Variant::RobinPMu0, n)?);
        ch.push(cahn_hilliard_error(params, n, ch_dt)?);
        let (a, b, d) = velocity_errors(params, n);
        vq.push(a);
        vp.push(b);
        disc = disc.max(d);
    }
    Ok(MmsReport {
        studies: vec![
            Study::from_errors("nutrient", levels, nutrient),
            Study::from_errors("pressure DIRICHLET_Q", levels, dq),
            Study::from_errors("pressure ROBIN_P", levels, rp),
            Study::from_errors("cahn-hilliard", levels, ch),
            Study::from_errors("velocity q-form", levels, vq),
            Study::from_errors("velocity p-form", levels, vp),
        ],
        q_p_discrepancy: disc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chd_core::model::ConsumptionSpec;

    fn fd_check(f: fn(f64, f64) -> Exact) {
        let (x, y, h) = (0.31, 0.67, 1e-4);
        let e = f(x, y);
        let dx = (f(x + h, y).value - f(x - h, y).value) / (2.0 * h);
        let dy = (f(x, y + h).value - f(x, y - h).value) / (2.0 * h);
        let lap = (f(x + h, y).value + f(x - h, y).value + f(x, y + h).value + f(x, y - h).value - 4.0 * e.value) / (h * h);
        assert!((dx - e.dx).abs() < 1e-6 && (dy - e.dy).abs() < 1e-6);
        assert!((lap - e.lap).abs() < 1e-4, "{lap} vs {}", e.lap);
    }

    #[test]
    fn manufactured_derivatives_match_finite_differences() {
        for f in [phi_exact, mu_exact, sigma_exact, q_exact, p_exact] {
            fd_check(f);
        }
    }

    #[test]
    fn constant_nutrient_without_forcing_is_exact() {
        let g = unit_grid(16);
        let p = ModelParams { consumption: ConsumptionSpec::Zero, ..ModelParams::default() };
        let one = ScalarField::constant(&g, 1.0);
        let (s, _) = solve_nutrient(&p, &one, &one, 1.0, None, opts()).unwrap();
        assert!((&s - &one).linf_norm() < 1e-13);
    }

    #[test]
    fn coarse_levels_converge_at_second_order() {
        let p = ModelParams { chi: 0.5, b_gradient: 0.01, ..ModelParams::default() };
        let r = mms_study(&p, &[16, 32]).unwrap();
        for s in &r.studies {
            assert!(s.min_order() > 1.7, "{}: {:?}", s.name, s.orders);
        }
        assert!(r.q_p_discrepancy < 1e-12);
    }
}
