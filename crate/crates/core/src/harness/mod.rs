//! Synthetic data, metrics, evaluation, benchmarking and the CLI.

pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;


pub use cli::cli_main;
pub use config::Config;
