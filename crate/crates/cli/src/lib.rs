//! Library side of the `mvlstm` command: configuration, subcommands and
//! the experiment harness they share.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::{ExperimentConfig, Overrides, Selector};
pub use error::{CliError, CliResult};
