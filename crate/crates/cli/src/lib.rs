//! Command-line front end for cardio-ssl: experiment bundles and presets,
//! the experiment directory layout, reports and figures.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
mod font;
pub mod plot;

pub use config::{ExperimentConfig, OUT_ROOT_ENV, PRESETS};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, ExperimentOutcome};
