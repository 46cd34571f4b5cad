//! Command-line front end: configuration, checkpoints, training,
//! evaluation, prediction and benchmarking.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod convert;
pub mod error;
pub mod eval;
pub mod predict;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
