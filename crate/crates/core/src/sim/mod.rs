//! Federated training simulator.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod signsgd;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, run_federated, ExperimentOutput, Federation};
pub use metrics::RoundMetrics;
