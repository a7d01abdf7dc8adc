//! Experiment configuration files and their resolution into a concrete run plan.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use svbnn_core::simdata::GeneratorSpec;
use svbnn_core::spikeslab::lambda_opt;
use svbnn_core::{Activation, Architecture, CoverageConfig, LinearModel, Model, SpikeSlabPrior, TrainingConfig};

/// Prior inclusion probability: a fixed value or the theory-driven default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSpec {
    Opt,
    Value(f64),
}

impl Serialize for LambdaSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LambdaSpec::Opt => s.serialize_str("opt"),
            LambdaSpec::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = LambdaSpec;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number in (0, 1) or the string \"opt\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<LambdaSpec, E> {
                Ok(LambdaSpec::Value(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<LambdaSpec, E> {
                Ok(LambdaSpec::Value(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<LambdaSpec, E> {
                Ok(LambdaSpec::Value(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<LambdaSpec, E> {
                if v == "opt" {
                    Ok(LambdaSpec::Opt)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

fn default_sigma0_sq() -> f64 {
    2.0
}
fn default_lambda() -> LambdaSpec {
    LambdaSpec::Opt
}
fn default_delta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    #[serde(default = "default_sigma0_sq")]
    pub sigma0_sq: f64,
    #[serde(default = "default_lambda")]
    pub lambda: LambdaSpec,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            sigma0_sq: default_sigma0_sq(),
            lambda: default_lambda(),
            delta: default_delta(),
        }
    }
}

/// The fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Network {
        input_dim: usize,
        widths: Vec<usize>,
        activation: Activation,
    },
    /// Bias-free linear map `xᵀβ`.
    Linear { input_dim: usize },
}

/// A model built from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub enum FitModel {
    Network(Architecture),
    Linear(LinearModel),
}

impl FitModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            FitModel::Network(a) => a,
            FitModel::Linear(m) => m,
        }
    }
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Network { input_dim, .. } | ModelSpec::Linear { input_dim } => *input_dim,
        }
    }

    pub fn build(&self) -> anyhow::Result<FitModel> {
        Ok(match self {
            ModelSpec::Network {
                input_dim,
                widths,
                activation,
            } => FitModel::Network(Architecture::new(*input_dim, widths.clone(), *activation).context("model")?),
            ModelSpec::Linear { input_dim } => FitModel::Linear(LinearModel::new(*input_dim).context("model")?),
        })
    }
}

fn default_hellinger_points() -> usize {
    1000
}
fn default_hellinger_samples() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HellingerSettings {
    /// Covariate draws for the Monte Carlo average over `x`.
    #[serde(default = "default_hellinger_points")]
    pub n_mc_x: usize,
    /// Posterior draws averaged over.
    #[serde(default = "default_hellinger_samples")]
    pub samples: usize,
}

fn default_true() -> bool {
    true
}
fn default_predict_samples() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    /// FPR/FNR of first-layer input selection; needs a known support.
    #[serde(default = "default_true")]
    pub selection: bool,
    /// Posterior draws `H` for the posterior-mean predictor.
    #[serde(default = "default_predict_samples")]
    pub predict_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hellinger: Option<HellingerSettings>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            selection: true,
            predict_samples: default_predict_samples(),
            coverage: None,
            hellinger: None,
        }
    }
}

fn default_replications() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// One experiment: data law, fitted model, prior, optimizer and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Base seed; replication `i` uses `seed + i` for its data and its training run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub generator: GeneratorSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub prior: PriorSettings,
    pub training: TrainingConfig,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid experiment config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field and reports the first offending one by name.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.replications == 0 {
            bail!("replications must be at least 1");
        }
        if self.generator.seed != 0 {
            bail!("generator.seed is ignored in experiments; set the top-level seed instead");
        }
        if self.training.seed != 0 {
            bail!("training.seed is ignored in experiments; set the top-level seed instead");
        }
        self.generator.validate()?;
        let problem = self.generator.problem(self.seed)?;
        let p = problem.input_dim();
        if self.model.input_dim() != p {
            bail!("model.input_dim is {} but the generator produces {p} inputs", self.model.input_dim());
        }
        let model = self.model.build()?;
        self.training.validate(self.generator.train_size())?;
        if !(self.prior.sigma0_sq > 0.0 && self.prior.sigma0_sq.is_finite()) {
            bail!("prior.sigma0_sq must be positive");
        }
        if !(self.prior.delta > 0.0 && self.prior.delta.is_finite()) {
            bail!("prior.delta must be positive");
        }
        match self.prior.lambda {
            LambdaSpec::Value(v) if !(v > 0.0 && v < 1.0) => bail!("prior.lambda must lie in (0, 1), got {v}"),
            LambdaSpec::Opt if !matches!(model, FitModel::Network(ref a) if a.uniform_width().is_some()) => {
                bail!("prior.lambda = \"opt\" needs a network with equal hidden widths")
            }
            _ => {}
        }
        if self.metrics.predict_samples == 0 {
            bail!("metrics.predict_samples must be at least 1");
        }
        if let Some(cov) = &self.metrics.coverage {
            cov.validate(p).context("metrics")?;
        }
        if let Some(h) = &self.metrics.hellinger {
            if h.n_mc_x == 0 || h.samples == 0 {
                bail!("metrics.hellinger.n_mc_x and metrics.hellinger.samples must be positive");
            }
        }
        if self.metrics.selection && problem.true_support.is_none() {
            bail!("metrics.selection requires a generator with a known support");
        }
        Ok(())
    }

    /// Prior inclusion probability after resolving `"opt"`.
    pub fn resolved_lambda(&self) -> anyhow::Result<f64> {
        match (self.prior.lambda, self.model.build()?) {
            (LambdaSpec::Value(v), _) => Ok(v),
            (LambdaSpec::Opt, FitModel::Network(arch)) => {
                Ok(lambda_opt(&arch, self.generator.train_size(), self.prior.delta)?)
            }
            (LambdaSpec::Opt, FitModel::Linear(_)) => bail!("prior.lambda = \"opt\" needs a network model"),
        }
    }

    pub fn prior(&self) -> anyhow::Result<SpikeSlabPrior> {
        Ok(SpikeSlabPrior::new(self.prior.sigma0_sq, self.resolved_lambda()?).context("prior")?)
    }

    /// Seeds of all replications in order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replications as u64).map(|i| self.seed + i).collect()
    }

    /// SHA-256 of the canonical JSON serialization. The output directory is left out so
    /// the same experiment written elsewhere keeps its identity.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output_dir = PathBuf::new();
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn resolve(&self) -> anyhow::Result<ResolvedConfig> {
        self.validate()?;
        let model = self.model.build()?;
        Ok(ResolvedConfig {
            config: self.clone(),
            config_hash: self.hash(),
            lambda: self.resolved_lambda()?,
            param_count: model.as_model().param_count(),
            train_size: self.generator.train_size(),
            test_size: self.generator.test_size(),
            seeds: self.seeds(),
        })
    }
}

/// Provenance record written as `resolved.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub lambda: f64,
    pub param_count: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim2() -> &'static str {
        r#"{
            "replications": 2,
            "generator": {"kind": "sparse_nonlinear"},
            "model": {"kind": "network", "input_dim": 200, "widths": [7, 7, 7], "activation": "relu"},
            "prior": {"lambda": "opt"},
            "training": {"minibatch_size": 512, "epochs": 10}
        }"#
    }

    #[test]
    fn parses_and_resolves_opt_lambda() {
        let cfg = ExperimentConfig::from_json(sim2()).unwrap();
        assert_eq!(cfg.prior.sigma0_sq, 2.0);
        let r = cfg.resolve().unwrap();
        assert!((r.lambda / 1.186e-4 - 1.0).abs() < 1e-3, "{}", r.lambda);
        assert_eq!(r.param_count, 1527);
        assert_eq!(r.seeds, vec![0, 1]);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::from_json(sim2()).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        let mut fixed = cfg.clone();
        fixed.prior.lambda = LambdaSpec::Value(0.25);
        assert_eq!(ExperimentConfig::from_json(&fixed.to_json()).unwrap(), fixed);
        assert_ne!(fixed.hash(), cfg.hash());
        let mut moved = cfg.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = sim2().replace("\"replications\": 2", "\"replications\": 2, \"replicates\": 3");
        let err = format!("{:#}", ExperimentConfig::from_json(&text).unwrap_err());
        assert!(err.contains("replicates"), "{err}");
        let text = sim2().replace("\"epochs\": 10", "\"epochs\": 10, \"lr\": 0.1");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let check = |from: &str, to: &str, field: &str| {
            let cfg = ExperimentConfig::from_json(&sim2().replace(from, to)).unwrap();
            let msg = format!("{:#}", cfg.validate().unwrap_err());
            assert!(msg.contains(field), "{msg} should mention {field}");
        };
        check("\"input_dim\": 200", "\"input_dim\": 20", "model.input_dim");
        check("\"minibatch_size\": 512", "\"minibatch_size\": 5000", "training.minibatch_size");
        check("\"lambda\": \"opt\"", "\"lambda\": 1.5", "prior.lambda");
        check("\"replications\": 2", "\"replications\": 0", "replications");
        check("\"widths\": [7, 7, 7]", "\"widths\": [7, 6, 7]", "prior.lambda");
        assert!(ExperimentConfig::from_json(&sim2().replace("\"opt\"", "\"best\"")).is_err());
    }
}
