//! Command-line runner for the `mmd-repr` experiments.
//!
//! Experiments are driven by JSON configs (see [`config`]); the utilities
//! (`mmd-test`, `probe`, `pca`) take flags. Errors carry a stable exit
//! code: 2 for bad configs or inputs, 3 for numerical failures.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod sources;

pub use commands::{execute, Cli};
pub use error::{CliError, CliResult};
