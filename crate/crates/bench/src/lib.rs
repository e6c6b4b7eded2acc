//! Datasets, task streams, configuration, metrics and the experiment runner
//! behind the `frcl` command-line tool.

pub mod config;
pub mod error;
pub mod idx;
pub mod metrics;
pub mod runner;
pub mod scoring;
pub mod streams;

pub use config::{Dataset, ExperimentConfig};
pub use error::{BenchError, Result};
pub use runner::{run_experiment, ExperimentSummary, RunOptions};
