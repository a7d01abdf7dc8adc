//! Spike-and-slab prior, the mean-field spike-and-slab variational family, its
//! reparameterized samplers and the closed-form KL penalty.
//!
//! Each parameter `θ_i` has slab mean `μ_i`, slab scale `σ_i = softplus(σ'_i)` and
//! inclusion probability `φ_i = 1 / (1 + exp(φ'_i))`. The optimizer works on the
//! unconstrained triple `(μ, σ', φ')`.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::network::{logistic, param_count, Architecture, Model};

/// Relaxed logits `η/τ` are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 35.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabPrior {
    sigma0_sq: f64,
    lambda: f64,
}

impl SpikeSlabPrior {
    pub fn new(sigma0_sq: f64, lambda: f64) -> Result<Self> {
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "sigma0_sq",
                value: sigma0_sq,
                reason: "slab variance must be positive",
            });
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "prior inclusion probability must lie in (0, 1)",
            });
        }
        Ok(Self { sigma0_sq, lambda })
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Gumbel-softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const MIN_DEFAULT: f64 = 0.5;

    /// Temperatures below 0.5 are rejected; see [`Temperature::any_positive`].
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau >= Self::MIN_DEFAULT && tau.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "tau",
                value: tau,
                reason: "temperature must be at least 0.5",
            });
        }
        Ok(Self(tau))
    }

    /// Any positive temperature, for studying the zero-temperature limit.
    pub fn any_positive(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "tau",
                value: tau,
                reason: "temperature must be positive",
            });
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.5)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(tau: f64) -> Result<Self> {
        Temperature::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Raw value `σ'` with `softplus(σ') = sigma`.
pub fn sigma_to_raw(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma + (-(sigma)).exp_m1().abs().ln()
    } else {
        sigma.exp_m1().ln()
    }
}

/// Raw value `φ'` with `1 / (1 + exp(φ')) = phi`.
pub fn phi_to_raw(phi: f64) -> f64 {
    ((1.0 - phi) / phi).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub sigma_raw: Vec<f64>,
    pub phi_raw: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mu: Vec<f64>, sigma_raw: Vec<f64>, phi_raw: Vec<f64>) -> Result<Self> {
        for (context, len) in [("sigma_raw length", sigma_raw.len()), ("phi_raw length", phi_raw.len())] {
            if len != mu.len() {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: mu.len(),
                    actual: len,
                });
            }
        }
        Ok(Self { mu, sigma_raw, phi_raw })
    }

    /// Every coordinate set to the same transformed values.
    pub fn constant(len: usize, mu: f64, sigma: f64, phi: f64) -> Self {
        Self {
            mu: vec![mu; len],
            sigma_raw: vec![sigma_to_raw(sigma); len],
            phi_raw: vec![phi_to_raw(phi); len],
        }
    }

    /// Slab means uniform on the Glorot interval, `φ = init_phi`, `σ' = sigma_raw`.
    pub fn initialize<M: Model + ?Sized, R: Rng + ?Sized>(
        model: &M,
        init_phi: f64,
        sigma_raw: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init_phi > 0.0 && init_phi < 1.0) {
            return Err(Error::InvalidParameter {
                name: "init_phi",
                value: init_phi,
                reason: "initial inclusion probability must lie in (0, 1)",
            });
        }
        let t = model.param_count();
        let mu = (0..t)
            .map(|i| {
                let bound = model.init_bound(i);
                rng.random_range(-bound..=bound)
            })
            .collect();
        Ok(Self {
            mu,
            sigma_raw: vec![sigma_raw; t],
            phi_raw: vec![phi_to_raw(init_phi); t],
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    #[inline]
    pub fn sigma(&self, i: usize) -> f64 {
        softplus(self.sigma_raw[i])
    }

    #[inline]
    pub fn phi(&self, i: usize) -> f64 {
        logistic(-self.phi_raw[i])
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.sigma_raw.iter().map(|&s| softplus(s)).collect()
    }

    pub fn phis(&self) -> Vec<f64> {
        self.phi_raw.iter().map(|&p| logistic(-p)).collect()
    }

    /// `φ_i · μ_i`, the posterior mean of each coordinate.
    pub fn posterior_means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.phi(i) * self.mu[i]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mu
            .iter()
            .chain(&self.sigma_raw)
            .chain(&self.phi_raw)
            .all(|v| v.is_finite())
    }
}

/// Gradient with respect to the raw triple `(μ, σ', φ')`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub mu: Vec<f64>,
    pub sigma_raw: Vec<f64>,
    pub phi_raw: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(len: usize) -> Self {
        Self {
            mu: vec![0.0; len],
            sigma_raw: vec![0.0; len],
            phi_raw: vec![0.0; len],
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for block in [&mut self.mu, &mut self.sigma_raw, &mut self.phi_raw] {
            block.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (dst, src) in [
            (&mut self.mu, &other.mu),
            (&mut self.sigma_raw, &other.sigma_raw),
            (&mut self.phi_raw, &other.phi_raw),
        ] {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.mu.iter().chain(&self.sigma_raw).chain(&self.phi_raw)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

/// Prior inclusion probability `λ` with
/// `log(1/λ) = log T + δ[(L+1) log N + log(√n · p)]` (natural logs).
pub fn lambda_opt(arch: &Architecture, n: usize, delta: f64) -> Result<f64> {
    let width = arch.uniform_width().ok_or_else(|| {
        Error::InvalidConfig("lambda_opt requires equal hidden widths".into())
    })?;
    if n == 0 {
        return Err(Error::InvalidConfig("lambda_opt requires n >= 1".into()));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "delta",
            value: delta,
            reason: "must be positive",
        });
    }
    let t = param_count(arch) as f64;
    let depth = arch.depth() as f64;
    let log_inv = t.ln()
        + delta * ((depth + 1.0) * (width as f64).ln() + ((n as f64).sqrt() * arch.input_dim() as f64).ln());
    Ok((-log_inv).exp())
}

/// Relaxed Bernoulli draw `γ̃ = 1 / (1 + exp(-η/τ))`, `η = logit(φ) + logit(u)`.
pub fn gumbel_softmax_sample(phi: f64, tau: Temperature, u: f64) -> Result<f64> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::InvalidParameter {
            name: "phi",
            value: phi,
            reason: "inclusion probability must lie strictly inside (0, 1)",
        });
    }
    check_uniform(u)?;
    Ok(relaxed_from_logit(logit(phi), tau.value(), u))
}

fn check_uniform(u: f64) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidParameter {
            name: "u",
            value: u,
            reason: "uniform draw must lie strictly inside (0, 1)",
        });
    }
    Ok(())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn relaxed_from_logit(alpha: f64, tau: f64, u: f64) -> f64 {
    let z = ((alpha + logit(u)) / tau).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    logistic(z)
}

/// `dγ̃/dφ'` for the relaxed mask of coordinate with raw inclusion `phi_raw`.
/// Zero where the logit clamp is active.
#[inline]
pub(crate) fn relaxed_mask_raw_derivative(phi_raw: f64, tau: f64, u: f64) -> f64 {
    let z = (-phi_raw + logit(u)) / tau;
    if z.abs() >= LOGIT_CLAMP {
        return 0.0;
    }
    let g = logistic(z);
    -g * (1.0 - g) / tau
}

/// Relaxed and hard inclusion masks for one draw of uniforms.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDraw {
    pub u: Vec<f64>,
    pub gamma_soft: Vec<f64>,
    pub gamma_hard: Vec<bool>,
}

impl MaskDraw {
    /// Masks from given uniforms; since `logit(φ) = -φ'` the raw value is used directly.
    pub fn from_uniforms(params: &VariationalParams, tau: Temperature, u: Vec<f64>) -> Result<Self> {
        if u.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "uniform draws",
                expected: params.len(),
                actual: u.len(),
            });
        }
        u.iter().try_for_each(|&v| check_uniform(v))?;
        let gamma_soft: Vec<f64> = params
            .phi_raw
            .iter()
            .zip(&u)
            .map(|(&pr, &ui)| relaxed_from_logit(-pr, tau.value(), ui))
            .collect();
        let gamma_hard = gamma_soft.iter().map(|&g| g > 0.5).collect();
        Ok(Self { u, gamma_soft, gamma_hard })
    }
}

pub fn sample_uniforms<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(Open01)).collect()
}

pub fn sample_normals<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `u_i ~ U(0,1)` and returns the relaxed mask `γ̃` with its hard version `1(γ̃ > 0.5)`.
pub fn sample_mask<R: Rng + ?Sized>(params: &VariationalParams, tau: Temperature, rng: &mut R) -> MaskDraw {
    let u = sample_uniforms(params.len(), rng);
    MaskDraw::from_uniforms(params, tau, u).expect("open-interval uniforms of matching length")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assembly {
    /// `γ_i (μ_i + σ_i ε_i)`, exact zeros where the mask is off.
    Hard,
    /// `γ̃_i (μ_i + σ_i ε_i)`.
    Soft,
}

pub fn assemble_theta(params: &VariationalParams, mask: &MaskDraw, eps: &[f64], mode: Assembly) -> Vec<f64> {
    assert_eq!(eps.len(), params.len(), "noise length must equal parameter count");
    (0..params.len())
        .map(|i| {
            let slab = params.mu[i] + params.sigma(i) * eps[i];
            match mode {
                Assembly::Hard => {
                    if mask.gamma_hard[i] {
                        slab
                    } else {
                        0.0
                    }
                }
                Assembly::Soft => mask.gamma_soft[i] * slab,
            }
        })
        .collect()
}

/// One complete reparameterized draw from the relaxed variational family.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedThetaSample {
    pub eps: Vec<f64>,
    pub u: Vec<f64>,
    pub gamma_soft: Vec<f64>,
    pub gamma_hard: Vec<bool>,
    pub theta: Vec<f64>,
    pub theta_soft: Vec<f64>,
}

impl MaskedThetaSample {
    pub fn draw<R: Rng + ?Sized>(params: &VariationalParams, tau: Temperature, rng: &mut R) -> Self {
        let eps = sample_normals(params.len(), rng);
        let mask = sample_mask(params, tau, rng);
        Self::from_draws(params, eps, mask)
    }

    pub fn from_draws(params: &VariationalParams, eps: Vec<f64>, mask: MaskDraw) -> Self {
        let theta = assemble_theta(params, &mask, &eps, Assembly::Hard);
        let theta_soft = assemble_theta(params, &mask, &eps, Assembly::Soft);
        Self {
            eps,
            u: mask.u,
            gamma_soft: mask.gamma_soft,
            gamma_hard: mask.gamma_hard,
            theta,
            theta_soft,
        }
    }
}

/// `F⁻¹(u)` for the mixture `(1-φ) δ_0 + φ N(μ, σ²)` together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseCdfDraw {
    pub value: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
    pub d_phi: f64,
}

/// Generalized inverse of `F(t) = (1-φ) 1(t ≥ 0) + φ Φ((t-μ)/σ)`.
pub fn inverse_cdf_sample(mu: f64, sigma: f64, phi: f64, u: f64) -> Result<f64> {
    inverse_cdf_with_partials(mu, sigma, phi, u).map(|d| d.value)
}

pub fn inverse_cdf_with_partials(mu: f64, sigma: f64, phi: f64, u: f64) -> Result<InverseCdfDraw> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            value: sigma,
            reason: "slab scale must be positive",
        });
    }
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidParameter {
            name: "phi",
            value: phi,
            reason: "inclusion probability must lie in [0, 1]",
        });
    }
    check_uniform(u)?;
    let atom = InverseCdfDraw {
        value: 0.0,
        d_mu: 0.0,
        d_sigma: 0.0,
        d_phi: 0.0,
    };
    if phi == 0.0 {
        return Ok(atom);
    }
    let std = Normal::standard();
    let below = phi * std.cdf(-mu / sigma);
    let (v, dv_dphi) = if u < below {
        let v = u / phi;
        (v, -v / phi)
    } else if u <= below + (1.0 - phi) {
        return Ok(atom);
    } else {
        let v = (u - (1.0 - phi)) / phi;
        (v, (1.0 - v) / phi)
    };
    let v = v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    let z = std.inverse_cdf(v);
    let density = std.pdf(z);
    Ok(InverseCdfDraw {
        value: mu + sigma * z,
        d_mu: 1.0,
        d_sigma: z,
        d_phi: sigma * dv_dphi / density,
    })
}

/// `KL(Bern(φ) ‖ Bern(λ))` with `0 log 0 = 0`.
pub fn kl_bernoulli(phi: f64, lambda: f64) -> f64 {
    let mut kl = 0.0;
    if phi > 0.0 {
        kl += phi * (phi.ln() - lambda.ln());
    }
    if phi < 1.0 {
        kl += (1.0 - phi) * ((-phi).ln_1p() - (-lambda).ln_1p());
    }
    kl
}

/// `KL(N(μ, σ²) ‖ N(0, σ_0²))`.
pub fn kl_gaussian(mu: f64, sigma: f64, sigma0_sq: f64) -> f64 {
    0.5 * (sigma0_sq / (sigma * sigma)).ln() + (sigma * sigma + mu * mu) / (2.0 * sigma0_sq) - 0.5
}

/// `Σ_i KL(Bern(φ_i) ‖ Bern(λ)) + Σ_i φ_i KL(N(μ_i, σ_i²) ‖ N(0, σ_0²))`.
pub fn kl_total(params: &VariationalParams, prior: &SpikeSlabPrior) -> f64 {
    (0..params.len()).map(|i| kl_coordinate(params, prior, i).0).sum()
}

/// KL value and its gradient in `(μ, σ', φ')`.
pub fn kl_total_gradient(params: &VariationalParams, prior: &SpikeSlabPrior) -> (f64, ParamGradients) {
    let mut grads = ParamGradients::zeros(params.len());
    let mut total = 0.0;
    for i in 0..params.len() {
        let (kl, [gm, gs, gp]) = kl_coordinate(params, prior, i);
        total += kl;
        grads.mu[i] = gm;
        grads.sigma_raw[i] = gs;
        grads.phi_raw[i] = gp;
    }
    (total, grads)
}

/// Works in log space from the raw values so that `φ` near 0 or 1 stays accurate.
fn kl_coordinate(params: &VariationalParams, prior: &SpikeSlabPrior, i: usize) -> (f64, [f64; 3]) {
    let phi_raw = params.phi_raw[i];
    let phi = logistic(-phi_raw);
    let one_minus_phi = logistic(phi_raw);
    let log_phi = -softplus(phi_raw);
    let log_one_minus_phi = -softplus(-phi_raw);
    let log_lambda = prior.lambda.ln();
    let log_one_minus_lambda = (-prior.lambda).ln_1p();

    let mu = params.mu[i];
    let sigma = softplus(params.sigma_raw[i]);
    let s0 = prior.sigma0_sq;
    let kl_slab = kl_gaussian(mu, sigma, s0);

    let kl_incl = phi * (log_phi - log_lambda) + one_minus_phi * (log_one_minus_phi - log_one_minus_lambda);
    let value = kl_incl + phi * kl_slab;

    let d_mu = phi * mu / s0;
    let d_sigma_raw = phi * (-1.0 / sigma + sigma / s0) * logistic(params.sigma_raw[i]);
    // dφ/dφ' = -φ(1-φ) and log φ - log(1-φ) = -φ'
    let d_phi_raw = -phi * one_minus_phi * (-phi_raw - log_lambda + log_one_minus_lambda + kl_slab);
    (value, [d_mu, d_sigma_raw, d_phi_raw])
}
