//! Scenario loading, error classes and the subcommand pipelines of `expdelay`.

pub mod commands;
pub mod error;
pub mod scenario;

pub use error::CliError;
pub use scenario::{LoadedScenario, Scenario};
