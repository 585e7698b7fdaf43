//! Experiment runner for `alens`: configuration, data fetching, sweeps over
//! acquisition functions and repetitions, and report generation.

pub mod config;
pub mod error;
pub mod fetch;
pub mod report;
pub mod runner;
pub mod score;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use fetch::cmd_fetch;
pub use report::cmd_report;
pub use runner::{cmd_run, RunManifest};
pub use score::cmd_score;
