//! Configuration, the end-to-end pipeline and result emission.

pub mod config;
pub mod emit;
pub mod pipeline;

pub use config::{ExperimentConfig, Method, Scenario};
pub use emit::{emit_results, emit_toy};
pub use pipeline::{run_algorithm1, run_baseline, run_toy, select_lambda, RunManifest, RunOutcome};
