//! Experiment harness: datasets, configs, the runner, summaries and reports.

mod config;
mod dataset;
mod metrics;
mod report;
mod runner;
mod stats;

pub use config::*;
pub use dataset::*;
pub use metrics::*;
pub use report::*;
pub use runner::*;
pub use stats::*;
