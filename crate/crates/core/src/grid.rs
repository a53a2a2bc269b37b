//! Cell-centred finite-volume geometry on a rectangle.
//!
//! Scalars live at cell centres, fluxes and velocities on faces. All
//! differential operators are written in flux form, so the discrete
//! divergence theorem `sum(div F) h^2 = boundary outflux` holds to round-off
//! and `divergence(gradient(f))` is the Laplacian by construction.
//!
//! A grid built with [`Grid2D::slab`] treats its south and north walls as
//! mirror planes: every field satisfies a zero normal gradient there and no
//! flux crosses them. This gives quasi one-dimensional runs in `x` without a
//! separate 1D code path.

use std::io::{BufRead, Write};
use std::ops::{Add, Mul, Sub};

use crate::error::GridError;
use crate::model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    mirror_y: bool,
}

/// The four sides of the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    /// Sign of the outward normal along the face's axis.
    pub fn outward(self) -> f64 {
        match self {
            Side::West | Side::South => -1.0,
            Side::East | Side::North => 1.0,
        }
    }
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GridError> {
        if nx < 3 || ny < 3 {
            return Err(GridError::TooSmall { nx, ny });
        }
        if !(lx.is_finite() && ly.is_finite() && lx > 0.0 && ly > 0.0) {
            return Err(GridError::BadLength { lx, ly });
        }
        Ok(Grid2D { nx, ny, lx, ly, mirror_y: false })
    }

    /// Quasi-1D grid whose south and north walls are mirror planes.
    pub fn slab(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GridError> {
        Ok(Grid2D { mirror_y: true, ..Self::new(nx, ny, lx, ly)? })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn ly(&self) -> f64 {
        self.ly
    }
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }
    pub fn is_slab(&self) -> bool {
        self.mirror_y
    }
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy())
    }

    pub fn x_faces(&self) -> usize {
        (self.nx + 1) * self.ny
    }
    pub fn y_faces(&self) -> usize {
        self.nx * (self.ny + 1)
    }
    /// Index of the x-face west of cell `(i, j)`; `i` ranges over `0..=nx`.
    #[inline]
    pub fn xf(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }
    /// Index of the y-face south of cell `(i, j)`; `j` ranges over `0..=ny`.
    #[inline]
    pub fn yf(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Whether a side carries boundary conditions (mirror walls do not).
    pub fn is_physical(&self, side: Side) -> bool {
        !(self.mirror_y && matches!(side, Side::South | Side::North))
    }

    /// Number of faces along a side.
    pub fn side_len(&self, side: Side) -> usize {
        match side {
            Side::West | Side::East => self.ny,
            Side::South | Side::North => self.nx,
        }
    }

    /// Normal spacing and face length for a side.
    pub fn side_metrics(&self, side: Side) -> (f64, f64) {
        match side {
            Side::West | Side::East => (self.hx(), self.hy()),
            Side::South | Side::North => (self.hy(), self.hx()),
        }
    }

    /// Interior cell adjacent to the `k`-th face of a side.
    pub fn side_cell(&self, side: Side, k: usize) -> usize {
        match side {
            Side::West => self.idx(0, k),
            Side::East => self.idx(self.nx - 1, k),
            Side::South => self.idx(k, 0),
            Side::North => self.idx(k, self.ny - 1),
        }
    }

    /// Face index (into the x- or y-face array) of the `k`-th face of a side.
    pub fn side_face(&self, side: Side, k: usize) -> usize {
        match side {
            Side::West => self.xf(0, k),
            Side::East => self.xf(self.nx, k),
            Side::South => self.yf(k, 0),
            Side::North => self.yf(k, self.ny),
        }
    }

    /// Midpoint of the `k`-th face of a side.
    pub fn side_point(&self, side: Side, k: usize) -> (f64, f64) {
        let (hx, hy) = (self.hx(), self.hy());
        match side {
            Side::West => (0.0, (k as f64 + 0.5) * hy),
            Side::East => (self.lx, (k as f64 + 0.5) * hy),
            Side::South => ((k as f64 + 0.5) * hx, 0.0),
            Side::North => ((k as f64 + 0.5) * hx, self.ly),
        }
    }

    /// Offset of side `side` in a per-boundary-face array (W, E, S, N order).
    fn side_offset(&self, side: Side) -> usize {
        match side {
            Side::West => 0,
            Side::East => self.ny,
            Side::South => 2 * self.ny,
            Side::North => 2 * self.ny + self.nx,
        }
    }

    pub fn boundary_faces(&self) -> usize {
        2 * (self.nx + self.ny)
    }
}

/// Per-boundary-face data, stored W, E, S, N, each side in increasing coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryValues {
    Constant(f64),
    PerFace(Vec<f64>),
}

impl BoundaryValues {
    pub fn from_fn(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut v = Vec::with_capacity(grid.boundary_faces());
        for side in Side::ALL {
            for k in 0..grid.side_len(side) {
                let (x, y) = grid.side_point(side, k);
                v.push(f(x, y));
            }
        }
        BoundaryValues::PerFace(v)
    }

    pub fn at(&self, grid: &Grid2D, side: Side, k: usize) -> f64 {
        match self {
            BoundaryValues::Constant(c) => *c,
            BoundaryValues::PerFace(v) => v[grid.side_offset(side) + k],
        }
    }
}

/// Boundary condition for one field on all physical sides.
#[derive(Debug, Clone, PartialEq)]
pub enum BcSpec {
    NeumannZero,
    Dirichlet(BoundaryValues),
    /// `k du/dn = a (g - u)`.
    Robin { a: f64, k: f64, g: BoundaryValues },
    /// Total flux `(m grad mu - phi v) . n = 0`. Diffusive operators see it
    /// as a zero-flux wall; the advective part is closed by the caller.
    CombinedFluxZero,
}

impl BcSpec {
    pub fn dirichlet(value: f64) -> Self {
        BcSpec::Dirichlet(BoundaryValues::Constant(value))
    }

    /// Coefficients `(beta, alpha)` of the closure `du/dn = alpha - beta * u_in`
    /// at face `k` of `side`, with `h` the normal cell spacing.
    pub fn closure(&self, grid: &Grid2D, side: Side, k: usize) -> (f64, f64) {
        if !grid.is_physical(side) {
            return (0.0, 0.0);
        }
        let (h, _) = grid.side_metrics(side);
        match self {
            BcSpec::NeumannZero | BcSpec::CombinedFluxZero => (0.0, 0.0),
            BcSpec::Dirichlet(g) => {
                let beta = 2.0 / h;
                (beta, beta * g.at(grid, side, k))
            }
            BcSpec::Robin { a, k: kk, g } => {
                let beta = a / (kk + 0.5 * a * h);
                (beta, beta * g.at(grid, side, k))
            }
        }
    }

    /// Outward normal derivative at a boundary face given the adjacent cell value.
    pub fn normal_derivative(&self, grid: &Grid2D, side: Side, k: usize, u_in: f64) -> f64 {
        let (beta, alpha) = self.closure(grid, side, k);
        alpha - beta * u_in
    }

    /// Reconstructed face value `u_in + (h/2) du/dn`.
    pub fn face_value(&self, grid: &Grid2D, side: Side, k: usize, u_in: f64) -> f64 {
        let (h, _) = grid.side_metrics(side);
        u_in + 0.5 * h * self.normal_derivative(grid, side, k, u_in)
    }
}

/// Cell-centred scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid2D, c: f64) -> Self {
        ScalarField { grid: *grid, values: vec![c; grid.cells()] }
    }

    pub fn from_fn(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.cells());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let (x, y) = grid.center(i, j);
                values.push(f(x, y));
            }
        }
        ScalarField { grid: *grid, values }
    }

    pub fn from_values(grid: &Grid2D, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.cells() {
            return Err(GridError::SizeMismatch { expected: grid.cells(), got: values.len() });
        }
        Ok(ScalarField { grid: *grid, values })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.values.len(), other.values.len());
        ScalarField {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn mean(&self) -> f64 {
        self.integrate() / self.grid.area()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_area()).sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `|f|_{H^1}` seminorm from face gradients, boundary faces at half weight.
    pub fn h1_seminorm(&self, bc: &BcSpec) -> f64 {
        let g = gradient(self, bc);
        g.weighted_dot(&g).sqrt()
    }

    pub fn h1_norm(&self, bc: &BcSpec) -> f64 {
        let s = self.h1_seminorm(bc);
        (self.l2_norm().powi(2) + s * s).sqrt()
    }

    /// Discrete inner product `sum f g h^2`.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_area()
    }
}

impl Add for &ScalarField {
    type Output = ScalarField;
    fn add(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ScalarField {
    type Output = ScalarField;
    fn sub(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul for &ScalarField {
    type Output = ScalarField;
    fn mul(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a * b)
    }
}

/// Pointwise cutoff to `[0, 1]`.
pub fn apply_cutoff_field(f: &ScalarField) -> ScalarField {
    f.map(model::cutoff)
}

/// Face-centred vector field: x-components on x-faces, y-components on y-faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVectorField {
    grid: Grid2D,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FaceVectorField {
    pub fn zeros(grid: &Grid2D) -> Self {
        FaceVectorField { grid: *grid, x: vec![0.0; grid.x_faces()], y: vec![0.0; grid.y_faces()] }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    pub fn map2(&self, other: &FaceVectorField, f: impl Fn(f64, f64) -> f64) -> Self {
        FaceVectorField {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(&a, &b)| f(a, b)).collect(),
            y: self.y.iter().zip(&other.y).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.x.iter().chain(&self.y).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Visit every face with its quadrature weight: `hx hy` for interior
    /// faces, half that on boundary faces.
    pub fn for_each_weighted(&self, mut f: impl FnMut(bool, usize, f64)) {
        let g = &self.grid;
        let w = g.cell_area();
        for j in 0..g.ny() {
            for i in 0..=g.nx() {
                let boundary = i == 0 || i == g.nx();
                f(true, g.xf(i, j), if boundary { 0.5 * w } else { w });
            }
        }
        for j in 0..=g.ny() {
            for i in 0..g.nx() {
                let boundary = j == 0 || j == g.ny();
                f(false, g.yf(i, j), if boundary { 0.5 * w } else { w });
            }
        }
    }

    /// `sum_faces F . G * weight`.
    pub fn weighted_dot(&self, other: &FaceVectorField) -> f64 {
        let mut s = 0.0;
        self.for_each_weighted(|is_x, k, w| {
            s += if is_x { self.x[k] * other.x[k] } else { self.y[k] * other.y[k] } * w;
        });
        s
    }

    /// Like [`weighted_dot`](Self::weighted_dot) restricted to interior faces.
    pub fn interior_dot(&self, other: &FaceVectorField) -> f64 {
        let g = &self.grid;
        let w = g.cell_area();
        let mut s = 0.0;
        for j in 0..g.ny() {
            for i in 1..g.nx() {
                let k = g.xf(i, j);
                s += self.x[k] * other.x[k] * w;
            }
        }
        for j in 1..g.ny() {
            for i in 0..g.nx() {
                let k = g.yf(i, j);
                s += self.y[k] * other.y[k] * w;
            }
        }
        s
    }

    pub fn l2_norm(&self) -> f64 {
        self.weighted_dot(self).sqrt()
    }

    /// Outward normal component at the `k`-th face of a side.
    pub fn normal(&self, side: Side, k: usize) -> f64 {
        let f = self.grid.side_face(side, k);
        side.outward()
            * match side {
                Side::West | Side::East => self.x[f],
                Side::South | Side::North => self.y[f],
            }
    }

    /// Set the outward normal component at a boundary face.
    pub fn set_normal(&mut self, side: Side, k: usize, value: f64) {
        let f = self.grid.side_face(side, k);
        let v = side.outward() * value;
        match side {
            Side::West | Side::East => self.x[f] = v,
            Side::South | Side::North => self.y[f] = v,
        }
    }

    /// `sum_{boundary faces} F . n |face|` over all four walls.
    pub fn boundary_outflux(&self) -> f64 {
        let mut s = 0.0;
        for side in Side::ALL {
            let (_, len) = self.grid.side_metrics(side);
            for k in 0..self.grid.side_len(side) {
                s += self.normal(side, k) * len;
            }
        }
        s
    }
}

/// Face-centred gradient; boundary faces use the closure of `bc`.
pub fn gradient(f: &ScalarField, bc: &BcSpec) -> FaceVectorField {
    let g = f.grid();
    let (hx, hy) = (g.hx(), g.hy());
    let mut out = FaceVectorField::zeros(g);
    for j in 0..g.ny() {
        for i in 1..g.nx() {
            out.x[g.xf(i, j)] = (f.at(i, j) - f.at(i - 1, j)) / hx;
        }
    }
    for j in 1..g.ny() {
        for i in 0..g.nx() {
            out.y[g.yf(i, j)] = (f.at(i, j) - f.at(i, j - 1)) / hy;
        }
    }
    for side in Side::ALL {
        for k in 0..g.side_len(side) {
            let u_in = f.values()[g.side_cell(side, k)];
            out.set_normal(side, k, bc.normal_derivative(g, side, k, u_in));
        }
    }
    out
}

/// Flux-form divergence.
pub fn divergence(flux: &FaceVectorField) -> ScalarField {
    let g = flux.grid();
    let (hx, hy) = (g.hx(), g.hy());
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            out.values[g.idx(i, j)] = (flux.x[g.xf(i + 1, j)] - flux.x[g.xf(i, j)]) / hx
                + (flux.y[g.yf(i, j + 1)] - flux.y[g.yf(i, j)]) / hy;
        }
    }
    out
}

/// Five-point flux-form Laplacian, `divergence(gradient(f, bc))`.
pub fn laplacian(f: &ScalarField, bc: &BcSpec) -> ScalarField {
    divergence(&gradient(f, bc))
}

/// Arithmetic face average; boundary faces take the adjacent cell value.
pub fn face_average(f: &ScalarField) -> FaceVectorField {
    let g = f.grid();
    let mut out = FaceVectorField::zeros(g);
    for j in 0..g.ny() {
        for i in 0..=g.nx() {
            let l = f.at(i.saturating_sub(1), j);
            let r = f.at(i.min(g.nx() - 1), j);
            out.x[g.xf(i, j)] = 0.5 * (l + r);
        }
    }
    for j in 0..=g.ny() {
        for i in 0..g.nx() {
            let s = f.at(i, j.saturating_sub(1));
            let n = f.at(i, j.min(g.ny() - 1));
            out.y[g.yf(i, j)] = 0.5 * (s + n);
        }
    }
    out
}

/// Major version of the field snapshot format.
pub const SNAPSHOT_MAJOR: u32 = 1;
const SNAPSHOT_TAG: &str = "# chd-field";

/// Parsed field snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub t: f64,
    pub values: Vec<f64>,
}

impl Snapshot {
    /// Attach the snapshot to a grid of matching shape.
    pub fn into_field(self, grid: &Grid2D) -> Result<ScalarField, GridError> {
        if self.nx != grid.nx() || self.ny != grid.ny() {
            return Err(GridError::SizeMismatch { expected: grid.cells(), got: self.nx * self.ny });
        }
        ScalarField::from_values(grid, self.values)
    }
}

/// Write a field as CSV: version line, `nx,ny,Lx,Ly,t` header and values,
/// then one row of `nx` values per `j`, 17 significant digits.
pub fn write_snapshot<W: Write>(out: &mut W, field: &ScalarField, t: f64) -> std::io::Result<()> {
    let g = field.grid();
    writeln!(out, "{SNAPSHOT_TAG} {SNAPSHOT_MAJOR}.0")?;
    writeln!(out, "nx,ny,Lx,Ly,t")?;
    writeln!(out, "{},{},{:.16e},{:.16e},{:.16e}", g.nx(), g.ny(), g.lx(), g.ly(), t)?;
    let mut line = String::new();
    for j in 0..g.ny() {
        line.clear();
        for i in 0..g.nx() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.16e}", field.at(i, j)));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(input: R) -> Result<Snapshot, GridError> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), GridError> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n + 1, l)),
            Some((n, Err(e))) => Err(GridError::Parse { line: n + 1, message: e.to_string() }),
            None => Err(GridError::Parse { line: 0, message: format!("missing {what}") }),
        }
    };
    let (n, version) = next("version line")?;
    let ver = version
        .strip_prefix(SNAPSHOT_TAG)
        .map(str::trim)
        .ok_or_else(|| GridError::Parse { line: n, message: "not a field snapshot".into() })?;
    let major = ver.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(SNAPSHOT_MAJOR) {
        return Err(GridError::Version(ver.to_string()));
    }
    let (n, header) = next("header")?;
    if header.trim() != "nx,ny,Lx,Ly,t" {
        return Err(GridError::Parse { line: n, message: format!("unexpected header {header:?}") });
    }
    let (n, meta) = next("dimensions")?;
    let parts: Vec<&str> = meta.split(',').map(str::trim).collect();
    let bad = |m: String| GridError::Parse { line: n, message: m };
    if parts.len() != 5 {
        return Err(bad(format!("expected 5 entries, got {}", parts.len())));
    }
    let nx: usize = parts[0].parse().map_err(|e| bad(format!("nx: {e}")))?;
    let ny: usize = parts[1].parse().map_err(|e| bad(format!("ny: {e}")))?;
    let float = |s: &str, name: &str| s.parse::<f64>().map_err(|e| bad(format!("{name}: {e}")));
    let lx = float(parts[2], "Lx")?;
    let ly = float(parts[3], "Ly")?;
    let t = float(parts[4], "t")?;
    let mut values = Vec::with_capacity(nx * ny);
    for _ in 0..ny {
        let (n, row) = next("data row")?;
        let before = values.len();
        for tok in row.split(',') {
            let v = tok
                .trim()
                .parse::<f64>()
                .map_err(|e| GridError::Parse { line: n, message: e.to_string() })?;
            values.push(v);
        }
        if values.len() - before != nx {
            return Err(GridError::Parse { line: n, message: format!("expected {nx} values") });
        }
    }
    Ok(Snapshot { nx, ny, lx, ly, t, values })
}
