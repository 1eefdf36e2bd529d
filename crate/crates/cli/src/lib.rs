//! Command implementations behind the `miaudit` binary.

pub mod artifacts;
pub mod cache;
pub mod compare;
pub mod config;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{roc_dump, run_experiment, RunSummary};
