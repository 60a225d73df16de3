//! Library surface of the command-line tool: configuration schema and the
//! subcommand entry points (also used by the acceptance suite).

pub mod commands;
pub mod config;
mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
