//! Library surface of the experiment runner, so integration tests can drive
//! the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
