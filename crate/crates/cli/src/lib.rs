//! Experiment runner for the `alternator` crate: configuration resolution and
//! the `train`, `generate`, `encode`, `impute`, `forecast` and `eval-density`
//! commands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{resolve, Overrides, Preset, RunConfig};
pub use error::CliError;
