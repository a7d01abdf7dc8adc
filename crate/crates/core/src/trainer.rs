//! Stochastic negative-ELBO estimation and the training loop.
//!
//! Each iteration draws one set of Gaussian and uniform variables, evaluates the
//! estimator with the hard mask (exact zeros for pruned coordinates) and takes a
//! gradient step on the relaxed surrogate in which every coordinate is scaled by
//! its Gumbel-softmax mask instead.

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::sparsity_hat;
use crate::network::{logistic, Model};
use crate::spikeslab::{
    assemble_theta, inverse_cdf_with_partials, kl_total_gradient, relaxed_mask_raw_derivative,
    sample_normals, sample_uniforms, Assembly, MaskDraw, ParamGradients, SpikeSlabPrior,
    Temperature, VariationalParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// How a parameter draw is produced from the uniform and Gaussian variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reparameterization {
    /// Hard mask forward, relaxed mask backward.
    #[default]
    GumbelSoftmax,
    /// Exact draw `F⁻¹(u)` of the spike-and-slab mixture.
    InverseCdf,
}

fn default_mc_samples() -> usize {
    1
}
fn default_learning_rate() -> f64 {
    5e-3
}
fn default_sigma_eps() -> f64 {
    1.0
}
fn default_init_phi() -> f64 {
    0.99
}
fn default_init_sigma_raw() -> f64 {
    -5.0
}
fn default_clip_norm() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub minibatch_size: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub tau: Temperature,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_sigma_eps")]
    pub sigma_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init_phi")]
    pub init_phi: f64,
    #[serde(default = "default_init_sigma_raw")]
    pub init_sigma_raw: f64,
    #[serde(default)]
    pub reparameterization: Reparameterization,
    /// Global gradient-norm ceiling.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

impl TrainingConfig {
    pub fn new(minibatch_size: usize, epochs: usize) -> Self {
        Self {
            minibatch_size,
            mc_samples: 1,
            tau: Temperature::default(),
            learning_rate: default_learning_rate(),
            epochs,
            optimizer: OptimizerKind::Adam,
            sigma_eps: 1.0,
            seed: 0,
            init_phi: default_init_phi(),
            init_sigma_raw: default_init_sigma_raw(),
            reparameterization: Reparameterization::GumbelSoftmax,
            clip_norm: default_clip_norm(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("training.{msg}")));
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be positive");
        }
        if self.minibatch_size > n {
            return bad(&format!("minibatch_size ({}) exceeds the sample size ({n})", self.minibatch_size));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return bad("sigma_eps must be positive");
        }
        if !(self.init_phi > 0.0 && self.init_phi < 1.0) {
            return bad("init_phi must lie in (0, 1)");
        }
        if !self.init_sigma_raw.is_finite() {
            return bad("init_sigma_raw must be finite");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// A minibatch together with the full sample size it stands in for.
#[derive(Debug, Clone, Copy)]
pub struct Minibatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    pub n_total: usize,
}

impl<'a> Minibatch<'a> {
    pub fn full(data: &'a Dataset) -> Self {
        Self {
            x: data.x.view(),
            y: data.y.view(),
            n_total: data.len(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::InvalidConfig("empty minibatch".into()));
        }
        if self.x.nrows() != self.y.len() {
            return Err(Error::DimensionMismatch {
                context: "minibatch responses",
                expected: self.x.nrows(),
                actual: self.y.len(),
            });
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.n_total as f64 / self.y.len() as f64
    }
}

/// The `K` Gaussian and uniform draws used by one estimator evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub eps: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl Draws {
    pub fn sample<R: Rng + ?Sized>(len: usize, mc_samples: usize, rng: &mut R) -> Self {
        let mut eps = Vec::with_capacity(mc_samples);
        let mut u = Vec::with_capacity(mc_samples);
        for _ in 0..mc_samples {
            eps.push(sample_normals(len, rng));
            u.push(sample_uniforms(len, rng));
        }
        Self { eps, u }
    }

    pub fn mc_samples(&self) -> usize {
        self.eps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub total: f64,
    /// `-(n/m)(1/K) Σ log p`
    pub reconstruction: f64,
    pub kl: f64,
}

/// `Σ_i [-½ log(2πσ²) - (y_i - ŷ_i)² / (2σ²)]`.
pub fn gaussian_loglik(y: ArrayView1<'_, f64>, yhat: ArrayView1<'_, f64>, sigma_eps: f64) -> f64 {
    assert_eq!(y.len(), yhat.len(), "response and prediction lengths differ");
    let var = sigma_eps * sigma_eps;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    y.iter()
        .zip(yhat.iter())
        .map(|(a, b)| norm - (a - b).powi(2) / (2.0 * var))
        .sum()
}

/// Parameter vector for draw `k`, hard or soft, plus what the backward pass needs.
struct DrawnTheta {
    value: Vec<f64>,
    mask: Option<MaskDraw>,
}

fn draw_theta(
    params: &VariationalParams,
    config: &TrainingConfig,
    draws: &Draws,
    k: usize,
    mode: Assembly,
) -> Result<DrawnTheta> {
    match config.reparameterization {
        Reparameterization::GumbelSoftmax => {
            let mask = MaskDraw::from_uniforms(params, config.tau, draws.u[k].clone())?;
            let value = assemble_theta(params, &mask, &draws.eps[k], mode);
            Ok(DrawnTheta {
                value,
                mask: Some(mask),
            })
        }
        Reparameterization::InverseCdf => {
            let value = (0..params.len())
                .map(|i| inverse_cdf_with_partials(params.mu[i], params.sigma(i), params.phi(i), draws.u[k][i]).map(|d| d.value))
                .collect::<Result<Vec<_>>>()?;
            Ok(DrawnTheta { value, mask: None })
        }
    }
}

fn check_draws(params: &VariationalParams, draws: &Draws) -> Result<()> {
    if draws.mc_samples() == 0 {
        return Err(Error::InvalidConfig("at least one Monte Carlo draw is required".into()));
    }
    for block in draws.eps.iter().chain(&draws.u) {
        if block.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "Monte Carlo draw",
                expected: params.len(),
                actual: block.len(),
            });
        }
    }
    Ok(())
}

fn estimate_with_assembly<M: Model + ?Sized>(
    model: &M,
    params: &VariationalParams,
    prior: &SpikeSlabPrior,
    batch: Minibatch<'_>,
    config: &TrainingConfig,
    draws: &Draws,
    mode: Assembly,
) -> Result<ElboEstimate> {
    batch.check()?;
    check_draws(params, draws)?;
    let k = draws.mc_samples();
    let mut nll = 0.0;
    for s in 0..k {
        let theta = draw_theta(params, config, draws, s, mode)?;
        let yhat = model.forward(&theta.value, batch.x)?;
        nll -= gaussian_loglik(batch.y, yhat.view(), config.sigma_eps);
    }
    let reconstruction = batch.scale() * nll / k as f64;
    let kl = crate::spikeslab::kl_total(params, prior);
    Ok(ElboEstimate {
        total: reconstruction + kl,
        reconstruction,
        kl,
    })
}

/// Stochastic negative ELBO with the hard mask, for fixed draws.
pub fn negative_elbo_with_draws<M: Model + ?Sized>(
    model: &M,
    params: &VariationalParams,
    prior: &SpikeSlabPrior,
    batch: Minibatch<'_>,
    config: &TrainingConfig,
    draws: &Draws,
) -> Result<ElboEstimate> {
    estimate_with_assembly(model, params, prior, batch, config, draws, Assembly::Hard)
}

/// Draws fresh `(ε, u)` and evaluates the hard-mask estimator.
pub fn negative_elbo_estimate<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &VariationalParams,
    prior: &SpikeSlabPrior,
    batch: Minibatch<'_>,
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<(ElboEstimate, Draws)> {
    let draws = Draws::sample(params.len(), config.mc_samples, rng);
    let est = negative_elbo_with_draws(model, params, prior, batch, config, &draws)?;
    Ok((est, draws))
}

/// The relaxed surrogate differentiated by [`elbo_gradient_with_draws`].
/// Identical to the hard estimator under inverse-CDF sampling.
pub fn soft_surrogate<M: Model + ?Sized>(
    model: &M,
    params: &VariationalParams,
    prior: &SpikeSlabPrior,
    batch: Minibatch<'_>,
    config: &TrainingConfig,
    draws: &Draws,
) -> Result<ElboEstimate> {
    estimate_with_assembly(model, params, prior, batch, config, draws, Assembly::Soft)
}

/// Exact gradient of the relaxed surrogate in `(μ, σ', φ')` for fixed draws.
///
/// Under inverse-CDF sampling `μ` and `σ'` are pathwise; `φ'` uses a linearized
/// local-expectation estimate built from the same draws.
pub fn elbo_gradient_with_draws<M: Model + ?Sized>(
    model: &M,
    params: &VariationalParams,
    prior: &SpikeSlabPrior,
    batch: Minibatch<'_>,
    config: &TrainingConfig,
    draws: &Draws,
) -> Result<ParamGradients> {
    batch.check()?;
    check_draws(params, draws)?;
    let t = params.len();
    let k = draws.mc_samples();
    let c = batch.scale() / k as f64;
    let tau = config.tau.value();

    let (_, mut grads) = kl_total_gradient(params, prior);
    for s in 0..k {
        let eps = &draws.eps[s];
        let u = &draws.u[s];
        let theta = draw_theta(params, config, draws, s, Assembly::Soft)?;
        let (_, g_theta) = model.nll_gradient(&theta.value, batch.x, batch.y, config.sigma_eps)?;
        match theta.mask {
            Some(mask) => {
                for i in 0..t {
                    let g = c * g_theta[i];
                    if g == 0.0 {
                        continue;
                    }
                    let gamma = mask.gamma_soft[i];
                    let sigma = params.sigma(i);
                    let slab = params.mu[i] + sigma * eps[i];
                    grads.mu[i] += g * gamma;
                    grads.sigma_raw[i] += g * gamma * eps[i] * logistic(params.sigma_raw[i]);
                    grads.phi_raw[i] += g * slab * relaxed_mask_raw_derivative(params.phi_raw[i], tau, u[i]);
                }
            }
            None => {
                for i in 0..t {
                    let g = c * g_theta[i];
                    if g == 0.0 {
                        continue;
                    }
                    let phi = params.phi(i);
                    let d = inverse_cdf_with_partials(params.mu[i], params.sigma(i), phi, u[i])?;
                    grads.mu[i] += g * d.d_mu;
                    grads.sigma_raw[i] += g * d.d_sigma * logistic(params.sigma_raw[i]);
                    // The pathwise φ-derivative is carried by the far tail of the slab and is
                    // useless once μ/σ is large, so φ takes the linearized local expectation
                    // E[L | γ=1] - E[L | γ=0] ≈ g·slab instead.
                    let slab = if d.d_mu > 0.0 { d.value } else { params.mu[i] + params.sigma(i) * eps[i] };
                    grads.phi_raw[i] += g * slab * (-phi * (1.0 - phi));
                }
            }
        }
    }
    Ok(grads)
}

/// Draws fresh `(ε, u)` and returns the surrogate gradient with the draws used.
pub fn elbo_gradient<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &VariationalParams,
    prior: &SpikeSlabPrior,
    batch: Minibatch<'_>,
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<(ParamGradients, Draws)> {
    let draws = Draws::sample(params.len(), config.mc_samples, rng);
    let g = elbo_gradient_with_draws(model, params, prior, batch, config, &draws)?;
    Ok((g, draws))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        step: u64,
        first: ParamGradients,
        second: ParamGradients,
    },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                step: 0,
                first: ParamGradients::zeros(len),
                second: ParamGradients::zeros(len),
            },
        }
    }
}

pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut VariationalParams,
    grads: &ParamGradients,
    config: &TrainingConfig,
) {
    let lr = config.learning_rate;
    let param_blocks = [&mut params.mu, &mut params.sigma_raw, &mut params.phi_raw];
    let grad_blocks = [&grads.mu, &grads.sigma_raw, &grads.phi_raw];
    match state {
        OptimizerState::Sgd => {
            for (p, g) in param_blocks.into_iter().zip(grad_blocks) {
                p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
            }
        }
        OptimizerState::Adam { step, first, second } => {
            *step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
            let first_blocks = [&mut first.mu, &mut first.sigma_raw, &mut first.phi_raw];
            let second_blocks = [&mut second.mu, &mut second.sigma_raw, &mut second.phi_raw];
            for (((p, g), m), v) in param_blocks.into_iter().zip(grad_blocks).zip(first_blocks).zip(second_blocks) {
                for i in 0..p.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean hard-mask estimate over the epoch's minibatches.
    pub neg_elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// `ŝ` at the end of the epoch.
    pub sparsity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<EpochRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn neg_elbo(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.neg_elbo).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: VariationalParams,
    pub trace: LossTrace,
}

fn clip_global_norm(grads: &mut ParamGradients, max_norm: f64) {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// Fits the variational posterior by stochastic optimization of the negative ELBO.
pub fn train<M: Model + ?Sized>(
    data: &Dataset,
    model: &M,
    prior: &SpikeSlabPrior,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training data is empty".into()));
    }
    if data.input_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset columns",
            expected: model.input_dim(),
            actual: data.input_dim(),
        });
    }
    config.validate(data.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = VariationalParams::initialize(model, config.init_phi, config.init_sigma_raw, &mut rng)?;
    let mut state = OptimizerState::new(config.optimizer, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = LossTrace::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_recon, mut sum_kl, mut iters) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.minibatch_size) {
            let x = data.x.select(Axis(0), chunk);
            let y = data.y.select(Axis(0), chunk);
            let batch = Minibatch {
                x: x.view(),
                y: y.view(),
                n_total: data.len(),
            };
            let draws = Draws::sample(params.len(), config.mc_samples, &mut rng);
            let est = negative_elbo_with_draws(model, &params, prior, batch, config, &draws)?;
            if !est.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    reconstruction: est.reconstruction,
                    kl: est.kl,
                });
            }
            let mut grads = elbo_gradient_with_draws(model, &params, prior, batch, config, &draws)?;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    reconstruction: est.reconstruction,
                    kl: est.kl,
                });
            }
            clip_global_norm(&mut grads, config.clip_norm);
            optimizer_step(&mut state, &mut params, &grads, config);
            sum_total += est.total;
            sum_recon += est.reconstruction;
            sum_kl += est.kl;
            iters += 1;
        }
        let it = iters as f64;
        trace.records.push(EpochRecord {
            epoch,
            neg_elbo: sum_total / it,
            reconstruction: sum_recon / it,
            kl: sum_kl / it,
            sparsity: sparsity_hat(&params),
        });
    }
    Ok(TrainOutcome { params, trace })
}
