//! Experiment runner: reads a TOML config, trains or loads the regular
//! population, trains star models, and writes checkpoints, curves and
//! reports into a run directory described by a manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use run::{RunContext, RunManifest};
