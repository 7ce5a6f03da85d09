//! Command-line front end: experiment configs, subcommands and result records.

pub mod commands;
pub mod config;
pub mod error;
pub mod records;

pub use config::ExperimentConfig;
pub use error::CliError;
