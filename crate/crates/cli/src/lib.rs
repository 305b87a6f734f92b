//! Experiment harness around `cotta-core`: TOML experiment configs, the
//! checkpoint format, CSV result files, and the commands behind the
//! `cotta` binary (`pretrain`, `adapt`, `sweep`, `report`).

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod results;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
