//! Finite-volume simulator for a Cahn-Hilliard-Darcy tumour growth model with
//! a quasi-static nutrient, together with verification diagnostics and
//! low-dimensional reference solvers.

pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod linsolve;
pub mod model;
pub mod oracle;
pub mod stepper;

pub use error::{GridError, ModelError, SolveError, StepError};
pub use grid::{BcSpec, FaceVectorField, Grid2D, ScalarField, Side};
pub use model::ModelParams;
pub use stepper::{SimState, StepConfig, Variant};
