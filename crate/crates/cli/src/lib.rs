//! Command implementations behind the `fluffnet` binary.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod train;

pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK};
