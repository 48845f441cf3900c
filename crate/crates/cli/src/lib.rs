//! Experiment orchestration for the `skipsponge` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{ExperimentConfig, Flags};
pub use error::{CliError, Result};
