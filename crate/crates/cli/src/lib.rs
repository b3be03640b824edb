//! Library side of the `nnkg` executable.

pub mod commands;
pub mod config;
pub mod verify;

pub use commands::CliError;
pub use config::RunConfig;
