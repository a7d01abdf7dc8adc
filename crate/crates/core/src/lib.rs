//! Sparse variational Bayesian neural networks with a spike-and-slab prior.

pub mod data;
pub mod error;
pub mod inference;
pub mod network;
pub mod simdata;
pub mod spikeslab;
pub mod trainer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use inference::{
    coverage_experiment, credible_interval, fpr_fnr, hellinger_sq_estimate, posterior_mean_predict, rmse,
    select_inputs, sparsity_hat, CoverageConfig, HellingerTarget, Interval, PosteriorEnsemble, PredictiveSamples,
    SelectionReport,
};
pub use network::{param_count, Activation, Architecture, LinearModel, Model};
pub use simdata::{CovariateLaw, GeneratorKind, GeneratorSpec, Oracle, Problem};
pub use spikeslab::{lambda_opt, SpikeSlabPrior, Temperature, VariationalParams};
pub use trainer::{train, LossTrace, OptimizerKind, Reparameterization, TrainOutcome, TrainingConfig};
