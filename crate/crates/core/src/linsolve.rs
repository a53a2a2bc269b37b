//! Five-point operators and Krylov solvers.
//!
//! A [`StencilOperator`] stores the linear part of `c0 u - div(kappa grad u)`
//! with boundary rows folded in; Dirichlet and Robin data end up in the
//! affine vector, so the discrete equation `c0 u - div(kappa grad u) = f`
//! reads `A u = f + affine`.

use crate::error::SolveError;
use crate::grid::{BcSpec, FaceVectorField, Grid2D, ScalarField, Side};

/// Face diffusivity of a Helmholtz-type operator.
#[derive(Debug, Clone)]
pub enum Diffusivity {
    Uniform(f64),
    Faces(FaceVectorField),
}

impl Diffusivity {
    #[inline]
    fn x(&self, k: usize) -> f64 {
        match self {
            Diffusivity::Uniform(c) => *c,
            Diffusivity::Faces(f) => f.x[k],
        }
    }
    #[inline]
    fn y(&self, k: usize) -> f64 {
        match self {
            Diffusivity::Uniform(c) => *c,
            Diffusivity::Faces(f) => f.y[k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StencilOperator {
    grid: Grid2D,
    pub center: Vec<f64>,
    pub east: Vec<f64>,
    pub west: Vec<f64>,
    pub north: Vec<f64>,
    pub south: Vec<f64>,
    pub affine: Vec<f64>,
}

impl StencilOperator {
    fn empty(grid: &Grid2D) -> Self {
        let n = grid.cells();
        StencilOperator {
            grid: *grid,
            center: vec![0.0; n],
            east: vec![0.0; n],
            west: vec![0.0; n],
            north: vec![0.0; n],
            south: vec![0.0; n],
            affine: vec![0.0; n],
        }
    }

    pub fn identity(grid: &Grid2D) -> Self {
        Self::diagonal(&ScalarField::constant(grid, 1.0))
    }

    pub fn diagonal(d: &ScalarField) -> Self {
        let mut op = Self::empty(d.grid());
        op.center.copy_from_slice(d.values());
        op
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    /// Multiply every coefficient and the affine vector by `s`.
    pub fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.center,
            &mut self.east,
            &mut self.west,
            &mut self.north,
            &mut self.south,
            &mut self.affine,
        ] {
            v.iter_mut().for_each(|c| *c *= s);
        }
        self
    }

    /// `out = A u` (linear part only).
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        for j in 0..ny {
            for i in 0..nx {
                let c = j * nx + i;
                let mut v = self.center[c] * u[c];
                if i + 1 < nx {
                    v += self.east[c] * u[c + 1];
                }
                if i > 0 {
                    v += self.west[c] * u[c - 1];
                }
                if j + 1 < ny {
                    v += self.north[c] * u[c + nx];
                }
                if j > 0 {
                    v += self.south[c] * u[c - nx];
                }
                out[c] = v;
            }
        }
    }

    pub fn apply(&self, u: &ScalarField) -> ScalarField {
        let mut out = ScalarField::zeros(&self.grid);
        self.apply_into(u.values(), out.values_mut());
        out
    }

    /// The full affine map `A u - affine`, i.e. `c0 u - div(kappa grad u)`.
    pub fn apply_affine(&self, u: &ScalarField) -> ScalarField {
        let mut out = self.apply(u);
        out.values_mut().iter_mut().zip(&self.affine).for_each(|(o, a)| *o -= a);
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.center.len())
            .map(|c| self.center[c] + self.east[c] + self.west[c] + self.north[c] + self.south[c])
            .collect()
    }

    /// Coefficient symmetry `A[c][c'] == A[c'][c]` to `tol`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let g = &self.grid;
        let nx = g.nx();
        (0..g.cells()).all(|c| {
            let (i, j) = (c % nx, c / nx);
            let ew = i + 1 >= nx || (self.east[c] - self.west[c + 1]).abs() <= tol;
            let ns = j + 1 >= g.ny() || (self.north[c] - self.south[c + nx]).abs() <= tol;
            ew && ns
        })
    }

    /// Non-positive off-diagonals and weak diagonal dominance.
    pub fn is_m_matrix(&self) -> bool {
        (0..self.center.len()).all(|c| {
            let off = [self.east[c], self.west[c], self.north[c], self.south[c]];
            off.iter().all(|&o| o <= 0.0)
                && self.center[c] > 0.0
                && self.center[c] + off.iter().sum::<f64>() >= -1e-12 * self.center[c]
        })
    }

    fn is_identity(&self) -> bool {
        self.center.iter().all(|&c| c == 1.0)
            && [&self.east, &self.west, &self.north, &self.south].iter().all(|v| v.iter().all(|&o| o == 0.0))
    }

    /// `I + s A` as a homogeneous operator (affine part dropped).
    fn shifted_identity(&self, s: f64) -> StencilOperator {
        let mut op = self.clone().scaled(s);
        op.center.iter_mut().for_each(|c| *c += 1.0);
        op.affine.iter_mut().for_each(|a| *a = 0.0);
        op
    }

    fn positive_diagonal(&self) -> bool {
        self.center.iter().all(|&d| d > 0.0)
    }
}

/// Assemble `c0 u - div(kappa grad u)` with the boundary closure of `bc`.
pub fn assemble_helmholtz(
    c0: &ScalarField,
    diffusivity: &Diffusivity,
    bc: &BcSpec,
) -> Result<StencilOperator, SolveError> {
    if let Some((cell, &value)) = c0.values().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(SolveError::NegativeReaction { cell, value });
    }
    let g = c0.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let (hx2, hy2) = (g.hx() * g.hx(), g.hy() * g.hy());
    let mut op = StencilOperator::diagonal(c0);
    for j in 0..ny {
        for i in 1..nx {
            let w = diffusivity.x(g.xf(i, j)) / hx2;
            let (l, r) = (g.idx(i - 1, j), g.idx(i, j));
            op.center[l] += w;
            op.center[r] += w;
            op.east[l] -= w;
            op.west[r] -= w;
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let w = diffusivity.y(g.yf(i, j)) / hy2;
            let (s, n) = (g.idx(i, j - 1), g.idx(i, j));
            op.center[s] += w;
            op.center[n] += w;
            op.north[s] -= w;
            op.south[n] -= w;
        }
    }
    for side in Side::ALL {
        let (h, _) = g.side_metrics(side);
        for k in 0..g.side_len(side) {
            let (beta, alpha) = bc.closure(g, side, k);
            if beta == 0.0 && alpha == 0.0 {
                continue;
            }
            let f = g.side_face(side, k);
            let kappa = match side {
                Side::West | Side::East => diffusivity.x(f),
                Side::South | Side::North => diffusivity.y(f),
            };
            let c = g.side_cell(side, k);
            op.center[c] += kappa * beta / h;
            op.affine[c] += kappa * alpha / h;
        }
    }
    Ok(op)
}

/// Outcome of a Krylov solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final relative residual `||b - A x|| / ||b||`.
    pub residual: f64,
    pub converged: bool,
    /// Relative residual after each iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverOptions {
    pub const fn new(tol: f64, max_iter: usize) -> Self {
        SolverOptions { tol, max_iter }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients (Jacobi) for `A u = rhs + affine`.
///
/// Iterates are passed through minimal residual smoothing, so the reported
/// residual history is non-increasing and the returned iterate is the
/// smoothed one.
pub fn solve_spd(
    op: &StencilOperator,
    rhs: &ScalarField,
    guess: Option<&ScalarField>,
    opts: SolverOptions,
) -> (ScalarField, SolveReport) {
    let grid = *op.grid();
    let n = grid.cells();
    let b: Vec<f64> = rhs.values().iter().zip(&op.affine).map(|(r, a)| r + a).collect();
    let bnorm = norm(&b);
    let mut x = guess.map_or_else(|| vec![0.0; n], |g| g.values().to_vec());
    if bnorm == 0.0 {
        let field = ScalarField::zeros(&grid);
        return (field, SolveReport { iterations: 0, residual: 0.0, converged: true, history: vec![] });
    }
    let inv_diag: Vec<f64> = op.center.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut ax = vec![0.0; n];
    op.apply_into(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut s = r.clone();
    let mut y = x.clone();
    let mut snorm = norm(&s);
    let mut history = Vec::new();
    let done = |y: Vec<f64>, it: usize, res: f64, history: Vec<f64>, converged: bool| {
        (
            ScalarField::from_values(&grid, y).expect("solver preserves length"),
            SolveReport { iterations: it, residual: res, converged, history },
        )
    };
    if snorm / bnorm <= opts.tol {
        return done(y, 0, snorm / bnorm, history, true);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut d = vec![0.0; n];
    for it in 1..=opts.max_iter {
        op.apply_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        // minimal residual smoothing
        for k in 0..n {
            d[k] = r[k] - s[k];
        }
        let dd = dot(&d, &d);
        if dd > 0.0 {
            let eta = -dot(&s, &d) / dd;
            for k in 0..n {
                s[k] += eta * d[k];
                y[k] += eta * (x[k] - y[k]);
            }
            snorm = norm(&s);
        }
        history.push(snorm / bnorm);
        if snorm / bnorm <= opts.tol {
            op.apply_into(&y, &mut ax);
            let true_res: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let tnorm = norm(&true_res);
            if tnorm / bnorm <= opts.tol {
                return done(y, it, tnorm / bnorm, history, true);
            }
            // recursion drifted; resynchronise both residuals
            s = true_res;
            snorm = tnorm;
            op.apply_into(&x, &mut ax);
            for k in 0..n {
                r[k] = b[k] - ax[k];
            }
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    op.apply_into(&y, &mut ax);
    let res = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
    let iterations = history.len();
    done(y, iterations, res, history, res <= opts.tol)
}

/// Like [`solve_spd`] but turns non-convergence into an error and checks the
/// operator's structural preconditions.
pub fn solve_spd_checked(
    op: &StencilOperator,
    rhs: &ScalarField,
    guess: Option<&ScalarField>,
    opts: SolverOptions,
) -> Result<(ScalarField, SolveReport), SolveError> {
    if !op.positive_diagonal() || !op.is_symmetric(1e-14 * op.center.iter().fold(1.0f64, |m, v| m.max(v.abs()))) {
        return Err(SolveError::NotSpd);
    }
    let (x, rep) = solve_spd(op, rhs, guess, opts);
    if rep.converged {
        Ok((x, rep))
    } else {
        Err(SolveError::NotConverged { iterations: rep.iterations, residual: rep.residual })
    }
}

/// 2x2 block of stencil operators acting on `(phi, mu)`:
/// `[a11 a12; a21 a22]`. Only linear parts are used.
#[derive(Debug, Clone)]
pub struct BlockOperator {
    pub a11: StencilOperator,
    pub a12: StencilOperator,
    pub a21: StencilOperator,
    pub a22: StencilOperator,
}

impl BlockOperator {
    fn apply_into(&self, u: &[f64], out: &mut [f64], tmp: &mut [f64]) {
        let n = self.a11.center.len();
        let (u1, u2) = u.split_at(n);
        let (o1, o2) = out.split_at_mut(n);
        self.a11.apply_into(u1, o1);
        self.a12.apply_into(u2, tmp);
        o1.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
        self.a21.apply_into(u1, o2);
        self.a22.apply_into(u2, tmp);
        o2.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
    }

    /// Per-cell inverse of the 2x2 diagonal blocks.
    fn block_jacobi(&self) -> Vec<[f64; 4]> {
        (0..self.a11.center.len())
            .map(|c| {
                let (a, b) = (self.a11.center[c], self.a12.center[c]);
                let (cc, d) = (self.a21.center[c], self.a22.center[c]);
                let det = a * d - b * cc;
                if det.abs() > 1e-14 * (a * d).abs().max((b * cc).abs()) && det != 0.0 {
                    [d / det, -b / det, -cc / det, a / det]
                } else {
                    let inv = |v: f64| if v != 0.0 { 1.0 / v } else { 1.0 };
                    [inv(a), 0.0, 0.0, inv(d)]
                }
            })
            .collect()
    }

    /// Residual norms `(||b1 - (A x)_1||, ||b2 - (A x)_2||)`.
    pub fn residual(&self, x1: &ScalarField, x2: &ScalarField, b1: &ScalarField, b2: &ScalarField) -> (ScalarField, ScalarField) {
        let n = x1.values().len();
        let mut u = x1.values().to_vec();
        u.extend_from_slice(x2.values());
        let mut out = vec![0.0; 2 * n];
        let mut tmp = vec![0.0; n];
        self.apply_into(&u, &mut out, &mut tmp);
        let g = x1.grid();
        let r1: Vec<f64> = b1.values().iter().zip(&out[..n]).map(|(b, a)| b - a).collect();
        let r2: Vec<f64> = b2.values().iter().zip(&out[n..]).map(|(b, a)| b - a).collect();
        (
            ScalarField::from_values(g, r1).expect("length"),
            ScalarField::from_values(g, r2).expect("length"),
        )
    }
}

/// Right preconditioner of a [`BlockOperator`].
///
/// For the Cahn-Hilliard shape `[I, D; -S, I]` (both `D` and `S` symmetric
/// positive semidefinite) it eliminates `mu` exactly and approximates the
/// Schur complement `I + D S` by `(I + g D)(I + S / g)` with `g` balancing
/// the two factors, so each application costs two SPD solves. Any other block
/// shape falls back to per-cell 2x2 block Jacobi.
#[allow(clippy::large_enum_variant)]
enum BlockPreconditioner<'a> {
    Jacobi(Vec<[f64; 4]>),
    Schur {
        op: &'a BlockOperator,
        factors: Option<(StencilOperator, StencilOperator)>,
    },
}

/// Relative tolerance of the inner SPD solves; tight enough that the
/// preconditioner is a fixed linear map as far as BiCGStab can tell.
const INNER_TOL: f64 = 1e-11;

impl<'a> BlockPreconditioner<'a> {
    fn new(op: &'a BlockOperator) -> Self {
        if !(op.a11.is_identity() && op.a22.is_identity()) {
            return BlockPreconditioner::Jacobi(op.block_jacobi());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let coupling = mean(&op.a12.center);
        let stiffness = -mean(&op.a21.center);
        let factors = if coupling > 0.0 && stiffness > 0.0 && coupling.is_finite() && stiffness.is_finite() {
            let g = (stiffness / coupling).sqrt();
            Some((op.a12.shifted_identity(g), op.a21.shifted_identity(-1.0 / g)))
        } else {
            None
        };
        BlockPreconditioner::Schur { op, factors }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            BlockPreconditioner::Jacobi(inv) => {
                let n = inv.len();
                for (c, k) in inv.iter().enumerate() {
                    let (a, d) = (v[c], v[c + n]);
                    out[c] = k[0] * a + k[1] * d;
                    out[c + n] = k[2] * a + k[3] * d;
                }
            }
            BlockPreconditioner::Schur { op, factors } => {
                let n = op.a11.center.len();
                let grid = *op.a11.grid();
                let (r1, r2) = v.split_at(n);
                let (o1, o2) = out.split_at_mut(n);
                op.a12.apply_into(r2, o1);
                let t: Vec<f64> = r1.iter().zip(o1.iter()).map(|(a, b)| a - b).collect();
                let phi = match factors {
                    Some((first, second)) => {
                        let opts = SolverOptions::new(INNER_TOL, 20 * n.max(50));
                        let t = ScalarField::from_values(&grid, t).expect("length");
                        let (y, _) = solve_spd(first, &t, None, opts);
                        solve_spd(second, &y, None, opts).0.values().to_vec()
                    }
                    None => t,
                };
                op.a21.apply_into(&phi, o2);
                for c in 0..n {
                    o2[c] = r2[c] - o2[c];
                }
                o1.copy_from_slice(&phi);
            }
        }
    }
}

enum KrylovEnd {
    Converged,
    Breakdown,
    Exhausted,
}

/// Right-preconditioned BiCGStab; restarts once with a fresh shadow residual
/// on breakdown. `x` holds the latest iterate on return.
#[allow(clippy::too_many_arguments)]
fn bicgstab(
    op: &BlockOperator,
    pre: &BlockPreconditioner<'_>,
    b: &[f64],
    bnorm: f64,
    x: &mut [f64],
    opts: SolverOptions,
    history: &mut Vec<f64>,
    iterations: &mut usize,
) -> KrylovEnd {
    let m = b.len();
    let n = m / 2;
    let mut tmp = vec![0.0; n];
    let mut ax = vec![0.0; m];
    let residual = |x: &[f64], ax: &mut [f64], tmp: &mut [f64]| -> Vec<f64> {
        op.apply_into(x, ax, tmp);
        b.iter().zip(ax.iter()).map(|(b, a)| b - a).collect()
    };
    let mut r = residual(x, &mut ax, &mut tmp);
    if norm(&r) / bnorm <= opts.tol {
        return KrylovEnd::Converged;
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; m];
    let mut p = vec![0.0; m];
    let mut p_hat = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut s_hat = vec![0.0; m];
    let mut t = vec![0.0; m];
    let mut restarts = 0;
    let restart = |r: &[f64], r_hat: &mut Vec<f64>, v: &mut Vec<f64>, p: &mut Vec<f64>| {
        r_hat.copy_from_slice(r);
        v.iter_mut().for_each(|e| *e = 0.0);
        p.iter_mut().for_each(|e| *e = 0.0);
    };
    while *iterations < opts.max_iter {
        *iterations += 1;
        let rho_new = dot(&r_hat, &r);
        let broken = !rho_new.is_finite() || rho_new.abs() <= 1e-30 * norm(&r_hat) * norm(&r);
        if broken {
            restarts += 1;
            if restarts > 1 {
                return KrylovEnd::Breakdown;
            }
            restart(&r, &mut r_hat, &mut v, &mut p);
            (rho, alpha, omega) = (1.0, 1.0, 1.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for k in 0..m {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        pre.apply(&p, &mut p_hat);
        op.apply_into(&p_hat, &mut v, &mut tmp);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            return KrylovEnd::Breakdown;
        }
        alpha = rho_new / rv;
        for k in 0..m {
            s[k] = r[k] - alpha * v[k];
        }
        pre.apply(&s, &mut s_hat);
        op.apply_into(&s_hat, &mut t, &mut tmp);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        if !omega.is_finite() {
            return KrylovEnd::Breakdown;
        }
        for k in 0..m {
            x[k] += alpha * p_hat[k] + omega * s_hat[k];
            r[k] = s[k] - omega * t[k];
        }
        rho = rho_new;
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if omega == 0.0 || rel <= opts.tol {
            // confirm against the true residual; drift or a stalled step restarts the recurrence
            r = residual(x, &mut ax, &mut tmp);
            if norm(&r) / bnorm <= opts.tol {
                return KrylovEnd::Converged;
            }
            restarts += 1;
            if restarts > 1 {
                return KrylovEnd::Breakdown;
            }
            restart(&r, &mut r_hat, &mut v, &mut p);
            (rho, alpha, omega) = (1.0, 1.0, 1.0);
        }
    }
    KrylovEnd::Exhausted
}

/// Flexible restarted GMRES (the preconditioner may vary between
/// applications); `x` holds the latest iterate on return.
#[allow(clippy::too_many_arguments)]
fn gmres(
    op: &BlockOperator,
    pre: &BlockPreconditioner<'_>,
    b: &[f64],
    bnorm: f64,
    x: &mut [f64],
    opts: SolverOptions,
    restart: usize,
    history: &mut Vec<f64>,
    iterations: &mut usize,
) -> KrylovEnd {
    let m = b.len();
    let n = m / 2;
    let mut tmp = vec![0.0; n];
    let mut ax = vec![0.0; m];
    while *iterations < opts.max_iter {
        op.apply_into(x, &mut ax, &mut tmp);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        if beta / bnorm <= opts.tol {
            return KrylovEnd::Converged;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess: Vec<Vec<f64>> = Vec::new();
        let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        let mut g = vec![beta];
        let mut directions: Vec<Vec<f64>> = Vec::new();
        let mut k = 0;
        while k < restart && *iterations < opts.max_iter {
            *iterations += 1;
            let mut z = vec![0.0; m];
            pre.apply(&basis[k], &mut z);
            let mut w = vec![0.0; m];
            op.apply_into(&z, &mut w, &mut tmp);
            directions.push(z);
            let mut h = vec![0.0; k + 2];
            for (i, q) in basis.iter().enumerate() {
                h[i] = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= h[i] * b);
            }
            h[k + 1] = norm(&w);
            for i in 0..k {
                let t = cs[i] * h[i] + sn[i] * h[i + 1];
                h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
                h[i] = t;
            }
            let d = h[k].hypot(h[k + 1]);
            if d == 0.0 || !d.is_finite() {
                return KrylovEnd::Breakdown;
            }
            let (c, s) = (h[k] / d, h[k + 1] / d);
            let next = if h[k + 1] > 0.0 { Some(w.iter().map(|v| v / h[k + 1]).collect()) } else { None };
            h[k] = d;
            h[k + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g.push(-s * g[k]);
            g[k] *= c;
            hess.push(h);
            k += 1;
            history.push(g[k].abs() / bnorm);
            match next {
                Some(q) if g[k].abs() / bnorm > opts.tol => basis.push(q),
                _ => break,
            }
        }
        // back substitution on the triangular factor
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| hess[j][i] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&directions[j]).for_each(|(u, d)| *u += yj * d);
        }
    }
    op.apply_into(x, &mut ax, &mut tmp);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if norm(&r) / bnorm <= opts.tol {
        KrylovEnd::Converged
    } else {
        KrylovEnd::Exhausted
    }
}

/// Solve the coupled `(phi, mu)` block system with right-preconditioned
/// BiCGStab, falling back to flexible restarted GMRES with the same
/// preconditioner when BiCGStab breaks down or stalls. The
/// right-hand sides must already contain any affine boundary contributions.
pub fn solve_block_ch(
    op: &BlockOperator,
    rhs_phi: &ScalarField,
    rhs_mu: &ScalarField,
    guess: Option<(&ScalarField, &ScalarField)>,
    opts: SolverOptions,
) -> Result<(ScalarField, ScalarField, SolveReport), SolveError> {
    let grid = *rhs_phi.grid();
    let n = grid.cells();
    let m = 2 * n;
    let mut b = rhs_phi.values().to_vec();
    b.extend_from_slice(rhs_mu.values());
    let bnorm = norm(&b);
    let split = |x: Vec<f64>| {
        let (a, c) = x.split_at(n);
        (
            ScalarField::from_values(&grid, a.to_vec()).expect("length"),
            ScalarField::from_values(&grid, c.to_vec()).expect("length"),
        )
    };
    if bnorm == 0.0 {
        let (p, q) = split(vec![0.0; m]);
        return Ok((p, q, SolveReport { iterations: 0, residual: 0.0, converged: true, history: vec![] }));
    }
    let start = match guess {
        Some((g1, g2)) => {
            let mut v = g1.values().to_vec();
            v.extend_from_slice(g2.values());
            v
        }
        None => vec![0.0; m],
    };
    let pre = BlockPreconditioner::new(op);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut x = start.clone();
    let budget = SolverOptions { max_iter: opts.max_iter / 2, ..opts };
    let first = bicgstab(op, &pre, &b, bnorm, &mut x, budget, &mut history, &mut iterations);
    let end = match first {
        KrylovEnd::Converged => KrylovEnd::Converged,
        _ => {
            if !x.iter().all(|v| v.is_finite()) {
                x = start;
            }
            gmres(op, &pre, &b, bnorm, &mut x, opts, 60, &mut history, &mut iterations)
        }
    };
    let mut tmp = vec![0.0; n];
    let mut ax = vec![0.0; m];
    op.apply_into(&x, &mut ax, &mut tmp);
    let residual = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
    match end {
        KrylovEnd::Converged => {
            let (p1, p2) = split(x);
            Ok((p1, p2, SolveReport { iterations, residual, converged: true, history }))
        }
        KrylovEnd::Breakdown => Err(SolveError::Breakdown { iterations }),
        KrylovEnd::Exhausted => Err(SolveError::NotConverged { iterations, residual }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{laplacian, BoundaryValues};
    use std::f64::consts::PI;

    fn unit(n: usize) -> Grid2D {
        Grid2D::new(n, n, 1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_diffusion_is_identity() {
        let g = unit(5);
        for bc in [BcSpec::NeumannZero, BcSpec::dirichlet(3.0)] {
            let op = assemble_helmholtz(&ScalarField::constant(&g, 1.0), &Diffusivity::Uniform(0.0), &bc).unwrap();
            assert_eq!(op, StencilOperator::identity(&g));
        }
    }

    #[test]
    fn neumann_poisson_rows_sum_to_zero() {
        let g = unit(6);
        let op = assemble_helmholtz(&ScalarField::zeros(&g), &Diffusivity::Uniform(1.3), &BcSpec::NeumannZero).unwrap();
        assert!(op.row_sums().iter().all(|s| s.abs() < 1e-11));
    }

    #[test]
    fn rejects_negative_reaction() {
        let g = unit(4);
        let mut c0 = ScalarField::zeros(&g);
        c0.values_mut()[5] = -1e-3;
        let err = assemble_helmholtz(&c0, &Diffusivity::Uniform(1.0), &BcSpec::NeumannZero).unwrap_err();
        assert_eq!(err, SolveError::NegativeReaction { cell: 5, value: -1e-3 });
    }

    #[test]
    fn operator_agrees_with_grid_laplacian() {
        let g = Grid2D::new(7, 5, 1.0, 0.6).unwrap();
        let f = ScalarField::from_fn(&g, |x, y| (3.0 * x).sin() + y * y);
        for bc in [
            BcSpec::NeumannZero,
            BcSpec::dirichlet(0.4),
            BcSpec::Robin { a: 1.5, k: 2.0, g: BoundaryValues::Constant(-0.3) },
        ] {
            let op = assemble_helmholtz(&ScalarField::zeros(&g), &Diffusivity::Uniform(1.0), &bc).unwrap();
            let lap = laplacian(&f, &bc);
            let a = op.apply_affine(&f);
            for (x, y) in a.values().iter().zip(lap.values()) {
                assert!((x + y).abs() < 1e-10, "{bc:?}");
            }
        }
    }

    #[test]
    fn identity_solve_is_one_iteration() {
        let g = unit(6);
        let rhs = ScalarField::from_fn(&g, |x, y| x - 2.0 * y);
        let (x, rep) = solve_spd(&StencilOperator::identity(&g), &rhs, None, SolverOptions::new(1e-12, 10));
        assert!(rep.converged && rep.iterations <= 1);
        assert!((&x - &rhs).linf_norm() < 1e-15);
    }

    #[test]
    fn diagonal_solve() {
        let g = unit(5);
        let d = ScalarField::from_fn(&g, |x, y| 1.0 + x + 3.0 * y);
        let rhs = ScalarField::from_fn(&g, |x, _| (7.0 * x).cos());
        let (x, rep) = solve_spd(&StencilOperator::diagonal(&d), &rhs, None, SolverOptions::new(1e-14, 20));
        assert!(rep.converged);
        let expect = rhs.zip_map(&d, |r, d| r / d);
        assert!((&x - &expect).linf_norm() < 1e-12);
    }

    #[test]
    fn cosh_profile_on_slab() {
        let g = Grid2D::slab(64, 3, 1.0, 3.0 / 64.0).unwrap();
        let exact = |x: f64| (x - 0.5).cosh() / 0.5f64.cosh();
        let op = assemble_helmholtz(&ScalarField::constant(&g, 1.0), &Diffusivity::Uniform(1.0), &BcSpec::dirichlet(1.0)).unwrap();
        assert!(op.is_m_matrix());
        let (u, rep) = solve_spd(&op, &ScalarField::zeros(&g), None, SolverOptions::new(1e-12, 1000));
        assert!(rep.converged);
        let err = ScalarField::from_fn(&g, |x, _| exact(x));
        assert!((&u - &err).linf_norm() < 2e-4);
    }

    #[test]
    fn manufactured_sine_poisson() {
        let g = Grid2D::slab(64, 3, 1.0, 0.05).unwrap();
        let op = assemble_helmholtz(&ScalarField::zeros(&g), &Diffusivity::Uniform(1.0), &BcSpec::dirichlet(0.0)).unwrap();
        let rhs = ScalarField::from_fn(&g, |x, _| PI * PI * (PI * x).sin());
        let (u, rep) = solve_spd(&op, &rhs, None, SolverOptions::new(1e-12, 1000));
        assert!(rep.converged);
        let exact = ScalarField::from_fn(&g, |x, _| (PI * x).sin());
        assert!((&u - &exact).linf_norm() < 1e-3);
    }

    #[test]
    fn residual_history_is_monotone_and_final_residual_honest() {
        let g = Grid2D::new(24, 17, 1.0, 0.8).unwrap();
        let c0 = ScalarField::from_fn(&g, |x, y| (x * y * 9.0).sin().abs());
        let kappa = Diffusivity::Uniform(0.7);
        let bc = BcSpec::Robin { a: 2.0, k: 0.7, g: BoundaryValues::Constant(1.0) };
        let op = assemble_helmholtz(&c0, &kappa, &bc).unwrap();
        let rhs = ScalarField::from_fn(&g, |x, y| (5.0 * x).sin() * (3.0 * y).cos());
        let tol = 1e-9;
        let (u, rep) = solve_spd(&op, &rhs, None, SolverOptions::new(tol, 2000));
        assert!(rep.converged);
        assert!(rep.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let b: Vec<f64> = rhs.values().iter().zip(&op.affine).map(|(r, a)| r + a).collect();
        let au = op.apply(&u);
        let res: f64 = au.values().iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res <= 10.0 * tol * bn);
    }

    #[test]
    fn decoupled_block_is_identity() {
        let g = unit(6);
        let id = StencilOperator::identity(&g);
        let zero = id.clone().scaled(0.0);
        let block = BlockOperator { a11: id.clone(), a12: zero.clone(), a21: zero, a22: id };
        let r1 = ScalarField::from_fn(&g, |x, _| x);
        let r2 = ScalarField::from_fn(&g, |_, y| y * y);
        let (p, m, rep) = solve_block_ch(&block, &r1, &r2, None, SolverOptions::new(1e-12, 10)).unwrap();
        assert!(rep.converged);
        assert!((&p - &r1).linf_norm() < 1e-14);
        assert!((&m - &r2).linf_norm() < 1e-14);
    }

    #[test]
    fn schur_preconditioner_keeps_stiff_ch_blocks_cheap() {
        let g = unit(48);
        let id = StencilOperator::identity(&g);
        let mobility = assemble_helmholtz(&ScalarField::zeros(&g), &Diffusivity::Uniform(1.0), &BcSpec::NeumannZero).unwrap();
        let curvature = ScalarField::from_fn(&g, |x, y| 3.0 * (0.5 * (4.0 * x).cos() * (3.0 * y).cos()).powi(2));
        let stiffness = assemble_helmholtz(&curvature, &Diffusivity::Uniform(1e-2), &BcSpec::NeumannZero).unwrap();
        let block = BlockOperator { a11: id.clone(), a12: mobility.scaled(1e-3), a21: stiffness.scaled(-1.0), a22: id };
        let r1 = ScalarField::from_fn(&g, |x, y| (PI * x).cos() + 0.3 * (7.0 * y).sin());
        let r2 = ScalarField::from_fn(&g, |x, y| x * y);
        let (p, m, rep) = solve_block_ch(&block, &r1, &r2, None, SolverOptions::new(1e-12, 400)).unwrap();
        assert!(rep.iterations <= 40, "{} iterations", rep.iterations);
        let (e1, e2) = block.residual(&p, &m, &r1, &r2);
        let bn = (r1.l2_norm().powi(2) + r2.l2_norm().powi(2)).sqrt();
        assert!((e1.l2_norm().powi(2) + e2.l2_norm().powi(2)).sqrt() <= 1e-11 * bn);
    }
}
