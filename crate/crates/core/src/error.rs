use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{name} must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("chemotaxis coefficient chi must be non-negative, got {0}")]
    NegativeChi(f64),
    #[error("theta must lie in [0, 1], got {0}")]
    ThetaRange(f64),
    #[error("mobility bounds must satisfy 0 < m0 <= m1, got m0={m0}, m1={m1}")]
    MobilityBounds { m0: f64, m1: f64 },
    #[error("truncation threshold s_star must exceed 1, got {0}")]
    TruncationThreshold(f64),
    #[error("shape {0} has non-finite coefficients or x1 <= x0")]
    InvalidShape(String),
    #[error("source coefficient {0} exceeds its declared sup-bound")]
    SourceBound(String),
    #[error("boundary datum table must have matching, increasing times and finite values")]
    BoundaryDatum,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 3 cells per direction, got {nx}x{ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("domain lengths must be positive and finite, got {lx}x{ly}")]
    BadLength { lx: f64, ly: f64 },
    #[error("field has {got} values, grid expects {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("snapshot parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported snapshot schema version {0}")]
    Version(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("negative reaction coefficient {value} at cell {cell}")]
    NegativeReaction { cell: usize, value: f64 },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("Krylov breakdown after {iterations} iterations: the coupled system is (near) singular; reduce dt")]
    Breakdown { iterations: usize },
    #[error("operator is not symmetric positive definite")]
    NotSpd,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{stage} solve failed: {source}")]
    Solve {
        stage: &'static str,
        #[source]
        source: SolveError,
    },
    #[error("advective CFL number {cfl:.3} exceeds 2; reduce dt")]
    Cfl { cfl: f64 },
    #[error("the Neumann chemical-potential variant requires a potential with bounded second derivative (quadratic growth)")]
    QuadraticGrowthRequired,
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("outer iteration count must be at least 1")]
    NoOuterIterations,
    #[error("nutrient left [0, 1]: min {min:e}, max {max:e}")]
    ComparisonPrinciple { min: f64, max: f64 },
    #[error("non-finite value in field {0}")]
    NonFinite(&'static str),
}

impl StepError {
    pub(crate) fn solve(stage: &'static str) -> impl FnOnce(SolveError) -> StepError {
        move |source| StepError::Solve { stage, source }
    }
}
