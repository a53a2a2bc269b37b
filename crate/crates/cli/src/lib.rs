//! Configuration, orchestration and artifact output for the `chd` binary.

pub mod checks;
pub mod config;
pub mod mms;
pub mod runner;
pub mod sweep;
pub mod verify;

/// Exit status of a configuration error.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status of a failed time step.
pub const EXIT_STEP: i32 = 3;
/// Exit status of an I/O failure while writing artifacts.
pub const EXIT_IO: i32 = 4;
