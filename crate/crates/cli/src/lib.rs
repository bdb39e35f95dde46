//! Command implementations behind the `step` binary. Every command is an
//! ordinary function so tests can drive it in-process.

pub mod ablate;
pub mod config;
pub mod error;
pub mod eval;
pub mod plan;
pub mod svg;
pub mod train;

pub use error::{CliError, ExitKind};
