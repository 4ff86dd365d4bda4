//! Experiment harness: config loading, training pipelines, sweeps and
//! metric emission for the token communication simulator.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
