//! Benchmark and verification harness behind the `mfcg` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

pub use config::RunConfig;
pub use error::CliError;
