//! Experiment harness for sparse variational Bayesian neural networks.

pub mod config;
pub mod experiment;
pub mod table;

pub use config::{ExperimentConfig, LambdaSpec, ResolvedConfig};
pub use experiment::{
    generate_data, parse_lambdas, resolve_jobs, run_coverage, run_experiment, sweep_lambda, ExperimentReport,
    ReplicationMetrics, SweepPoint,
};
