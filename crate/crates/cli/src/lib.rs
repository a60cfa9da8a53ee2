//! Pipeline commands behind the `stepq` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod report;

pub use commands::Context;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
