//! Independent low-dimensional references: an RK4 integrator for spatially
//! constant states and a one-dimensional cosine-basis Galerkin solver for the
//! pure Cahn-Hilliard core.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::model::ModelParams;

/// RK4 solution at time `t_end` of `dphi/dt = b_phi(phi) + f_phi(phi)`, the
/// reduction of the phase equation for constant fields with `sigma = 1`.
pub fn ode_reference(phi0: f64, params: &ModelParams, t_end: f64, dt: f64) -> f64 {
    let rhs = |p: f64| params.sources.eval(p, 1.0, true).1;
    let steps = (t_end / dt).round() as usize;
    let mut phi = phi0;
    for _ in 0..steps {
        let k1 = rhs(phi);
        let k2 = rhs(phi + 0.5 * dt * k1);
        let k3 = rhs(phi + 0.5 * dt * k2);
        let k4 = rhs(phi + dt * k3);
        phi += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    phi
}

/// Coefficients of `phi` and `mu` in the basis `cos(k pi x / L)`, `k < modes`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalerkinState {
    pub length: f64,
    pub phi: Vec<f64>,
    pub mu: Vec<f64>,
}

impl GalerkinState {
    pub fn modes(&self) -> usize {
        self.phi.len()
    }

    /// Project `f` onto the first `modes` cosines (midpoint quadrature on `8 modes` points).
    pub fn project(f: impl Fn(f64) -> f64, modes: usize, length: f64) -> GalerkinState {
        let quad = Quadrature::new(modes, length, 8 * modes.max(1));
        let vals: Vec<f64> = quad.points.iter().map(|&x| f(x)).collect();
        GalerkinState { length, phi: quad.analyse(&vals), mu: vec![0.0; modes] }
    }

    /// `phi(x)` from the cosine expansion.
    pub fn eval(&self, x: f64) -> f64 {
        self.phi
            .iter()
            .enumerate()
            .map(|(k, c)| c * (k as f64 * std::f64::consts::PI * x / self.length).cos())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().chain(&self.mu).all(|v| v.is_finite())
    }
}

/// Midpoint collocation on `[0, L]`; exact for cosine polynomials of degree `< 2 points`.
struct Quadrature {
    points: Vec<f64>,
    weight: f64,
    /// `basis[q * modes + k] = cos(k pi x_q / L)`.
    basis: Vec<f64>,
    modes: usize,
    length: f64,
}

impl Quadrature {
    fn new(modes: usize, length: f64, npts: usize) -> Self {
        let weight = length / npts as f64;
        let points: Vec<f64> = (0..npts).map(|q| (q as f64 + 0.5) * weight).collect();
        let mut basis = Vec::with_capacity(npts * modes);
        for &x in &points {
            for k in 0..modes {
                basis.push((k as f64 * std::f64::consts::PI * x / length).cos());
            }
        }
        Quadrature { points, weight, basis, modes, length }
    }

    fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..self.points.len())
            .map(|q| {
                let row = &self.basis[q * self.modes..(q + 1) * self.modes];
                row.iter().zip(coeffs).map(|(b, c)| b * c).sum()
            })
            .collect()
    }

    fn norm2(&self, k: usize) -> f64 {
        if k == 0 {
            self.length
        } else {
            0.5 * self.length
        }
    }

    /// Orthogonal projection of point values.
    fn analyse(&self, vals: &[f64]) -> Vec<f64> {
        (0..self.modes)
            .map(|k| {
                let s: f64 = vals.iter().enumerate().map(|(q, v)| v * self.basis[q * self.modes + k]).sum();
                s * self.weight / self.norm2(k)
            })
            .collect()
    }

    /// Matrix of `phi -> P[c phi]` for a point-valued multiplier `c`.
    fn multiplication(&self, c: &[f64]) -> DMatrix<f64> {
        let n = self.modes;
        DMatrix::from_fn(n, n, |i, j| {
            let s: f64 = (0..self.points.len())
                .map(|q| c[q] * self.basis[q * n + i] * self.basis[q * n + j])
                .sum();
            s * self.weight / self.norm2(i)
        })
    }
}

/// One convex-split step of `phi_t = m mu_xx`, `mu = A Psi'(phi) - B phi_xx` in
/// the cosine Galerkin space, with constant mobility `m(0)`, the same
/// linearisation of the convex part as the grid stepper and `outer_iters`
/// re-linearisations about the latest iterate. Nonlinear terms are projected
/// by collocation on `2 N` points, exact for products up to quartic order.
pub fn spectral_ch_step(state: &GalerkinState, params: &ModelParams, dt: f64, outer_iters: usize) -> GalerkinState {
    let n = state.modes();
    let quad = Quadrature::new(n, state.length, 2 * n);
    let mobility = params.mobility(0.0);
    let (a, b) = (params.a_energy, params.b_gradient);
    let lambda: Vec<f64> = (0..n)
        .map(|k| (k as f64 * std::f64::consts::PI / state.length).powi(2))
        .collect();
    let mut lin = state.phi.clone();
    let mut phi = state.phi.clone();
    let mut explicit = vec![0.0; n];
    let mut mult = DMatrix::zeros(n, n);
    for _ in 0..outer_iters.max(1) {
        let pts = quad.synthesize(&lin);
        let curv: Vec<f64> = pts.iter().map(|&p| params.potential(p).ddpsi + 1.0).collect();
        let resid: Vec<f64> = pts
            .iter()
            .zip(&curv)
            .map(|(&p, &c)| params.potential(p).dpsi + p - c * p)
            .collect();
        mult = quad.multiplication(&curv);
        let r = quad.analyse(&resid);
        // mu = A (r + M phi - phi_old) + B lambda phi
        for k in 0..n {
            explicit[k] = a * (r[k] - state.phi[k]);
        }
        let mut sys = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for i in 0..n {
            let s = dt * mobility * lambda[i];
            for j in 0..n {
                sys[(i, j)] += s * a * mult[(i, j)];
            }
            sys[(i, i)] += s * b * lambda[i];
            rhs[i] = state.phi[i] - s * explicit[i];
        }
        let sol = sys.lu().solve(&rhs).expect("Galerkin system is nonsingular for dt > 0");
        phi = sol.iter().copied().collect();
        lin = phi.clone();
    }
    let mphi = &mult * DVector::from_column_slice(&phi);
    let mu = (0..n).map(|k| explicit[k] + a * mphi[k] + b * lambda[k] * phi[k]).collect();
    GalerkinState { length: state.length, phi, mu }
}

/// Trajectory sample of a one-dimensional run: `(t, values at cell centres)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRun1D {
    pub params: ModelParams,
    pub dt: f64,
    pub length: f64,
    pub samples: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinRun {
    pub params: ModelParams,
    pub dt: f64,
    pub samples: Vec<(f64, GalerkinState)>,
}

/// Evolve a Galerkin state, sampling every `every` steps (and at the end).
pub fn galerkin_run(
    init: GalerkinState,
    params: &ModelParams,
    dt: f64,
    steps: usize,
    every: usize,
    outer_iters: usize,
) -> GalerkinRun {
    let mut samples = vec![(0.0, init.clone())];
    let mut s = init;
    for k in 1..=steps {
        s = spectral_ch_step(&s, params, dt, outer_iters);
        if k % every.max(1) == 0 || k == steps {
            samples.push((k as f64 * dt, s.clone()));
        }
    }
    GalerkinRun { params: params.clone(), dt, samples }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossReport {
    pub max_l2: f64,
    pub tol: f64,
    pub pass: bool,
    pub note: Option<String>,
}

/// Max-over-time `L^2(0, L)` discrepancy between a grid run and a Galerkin
/// run with matching parameters and sample times.
pub fn cross_validate(grid_run: &GridRun1D, galerkin: &GalerkinRun, tol: f64) -> CrossReport {
    let fail = |note: &str| CrossReport { max_l2: f64::INFINITY, tol, pass: false, note: Some(note.to_string()) };
    if grid_run.params != galerkin.params || grid_run.dt != galerkin.dt {
        return fail("parameter mismatch");
    }
    if grid_run.samples.len() != galerkin.samples.len() {
        return fail("sample count mismatch");
    }
    let mut max_l2 = 0.0f64;
    for ((tg, vals), (ts, st)) in grid_run.samples.iter().zip(&galerkin.samples) {
        if (tg - ts).abs() > 1e-9 * tg.abs().max(1.0) {
            return fail("sample time mismatch");
        }
        if (st.length - grid_run.length).abs() > 1e-12 {
            return fail("domain length mismatch");
        }
        let h = grid_run.length / vals.len() as f64;
        let e2: f64 = vals
            .iter()
            .enumerate()
            .map(|(i, v)| (v - st.eval((i as f64 + 0.5) * h)).powi(2))
            .sum::<f64>()
            * h;
        max_l2 = max_l2.max(e2.sqrt());
    }
    CrossReport { max_l2, tol, pass: max_l2 < tol, note: None }
}

/// Linear growth rate `m lambda (A Psi''(0) - B lambda)` of mode `k`, `lambda = (k pi / L)^2`.
pub fn dispersion_rate(params: &ModelParams, k: usize, length: f64) -> f64 {
    let lambda = (k as f64 * std::f64::consts::PI / length).powi(2);
    params.mobility(0.0) * lambda * (params.a_energy * params.potential(0.0).ddpsi.abs() - params.b_gradient * lambda)
}

/// Observed growth rate `ln(a_1(T)/a_1(0)) / T` of the first mode.
pub fn observed_rate(a0: f64, a_t: f64, t: f64) -> f64 {
    (a_t / a0).ln() / t
}
