//! Command-line orchestration for multi-head incremental re-identification.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
