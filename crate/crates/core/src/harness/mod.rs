//! Configuration, synthetic data, persistence and end-to-end pipelines.

pub mod config;
pub mod data;
pub mod manifest;
pub mod persistence;
pub mod pipeline;

pub use config::{ExperimentConfig, NamedAttack};
pub use manifest::RunManifest;
pub use pipeline::{run_pipeline, RunOutcome, RunSummary};
