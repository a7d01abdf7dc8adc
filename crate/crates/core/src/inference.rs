//! Prediction, sparsity, variable selection and uncertainty quantification from a
//! fitted spike-and-slab variational posterior.
//!
//! Posterior draws here use exact Bernoulli(φ) masks; the Gumbel-softmax
//! relaxation only exists for training.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::simdata::{Oracle, Problem};
use crate::spikeslab::VariationalParams;

/// `H` parameter vectors drawn from the variational posterior.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    pub thetas: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

impl PosteriorEnsemble {
    pub fn draw<R: Rng + ?Sized>(params: &VariationalParams, count: usize, rng: &mut R) -> Self {
        let mut thetas = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        for _ in 0..count {
            let (theta, mask) = draw_posterior_theta(params, rng);
            thetas.push(theta);
            masks.push(mask);
        }
        Self { thetas, masks }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    /// `n_samples × n_points` matrix of `f_θh(x)`.
    pub fn predict<M: Model + ?Sized>(&self, model: &M, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.len(), x.nrows()));
        for (h, theta) in self.thetas.iter().enumerate() {
            out.row_mut(h).assign(&model.forward(theta, x)?);
        }
        Ok(out)
    }
}

fn draw_posterior_theta<R: Rng + ?Sized>(params: &VariationalParams, rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    let t = params.len();
    let mut theta = vec![0.0; t];
    let mut mask = vec![false; t];
    for i in 0..t {
        let u: f64 = rng.sample(Open01);
        let e: f64 = StandardNormal.sample(rng);
        if u < params.phi(i) {
            mask[i] = true;
            theta[i] = params.mu[i] + params.sigma(i) * e;
        }
    }
    (theta, mask)
}

/// `f̂_H(x) = (1/H) Σ_h f_θh(x)` over `H` posterior draws.
pub fn posterior_mean_predict<M: Model + ?Sized, R: Rng + ?Sized>(
    params: &VariationalParams,
    model: &M,
    x: ArrayView2<'_, f64>,
    samples: usize,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if samples == 0 {
        return Err(Error::InvalidConfig("posterior mean needs at least one sample".into()));
    }
    let mut acc = Array1::zeros(x.nrows());
    for _ in 0..samples {
        let (theta, _) = draw_posterior_theta(params, rng);
        acc += &model.forward(&theta, x)?;
    }
    Ok(acc / samples as f64)
}

/// `ŝ = Σ φ_i / T`.
pub fn sparsity_hat(params: &VariationalParams) -> f64 {
    if params.is_empty() {
        return 0.0;
    }
    params.phis().iter().sum::<f64>() / params.len() as f64
}

/// Inputs (zero-based) with at least one outgoing first-layer parameter whose `φ` exceeds `threshold`.
pub fn select_inputs<M: Model + ?Sized>(params: &VariationalParams, model: &M, threshold: f64) -> BTreeSet<usize> {
    model
        .input_connections()
        .into_iter()
        .filter(|&(idx, _)| params.phi(idx) > threshold)
        .map(|(_, input)| input)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub selected: BTreeSet<usize>,
    /// Percentage of irrelevant inputs selected.
    pub fpr: f64,
    /// Percentage of relevant inputs missed.
    pub fnr: f64,
}

pub fn fpr_fnr(selected: &BTreeSet<usize>, truth: &BTreeSet<usize>, p: usize) -> Result<SelectionReport> {
    if truth.is_empty() {
        return Err(Error::InvalidConfig("true support must be nonempty".into()));
    }
    if truth.len() > p || truth.iter().any(|&j| j >= p) {
        return Err(Error::InvalidConfig("true support exceeds the input dimension".into()));
    }
    let false_pos = selected.difference(truth).count();
    let false_neg = truth.difference(selected).count();
    let nulls = p - truth.len();
    let fpr = if nulls == 0 {
        0.0
    } else {
        100.0 * false_pos as f64 / nulls as f64
    };
    Ok(SelectionReport {
        selected: selected.clone(),
        fpr,
        fnr: 100.0 * false_neg as f64 / truth.len() as f64,
    })
}

pub fn rmse(y: ArrayView1<'_, f64>, yhat: ArrayView1<'_, f64>) -> f64 {
    assert_eq!(y.len(), yhat.len(), "length mismatch");
    let mse = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    mse.sqrt()
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Sampled response means at a set of query points, one column per point.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    sorted_columns: Vec<Vec<f64>>,
}

impl PredictiveSamples {
    pub fn draw<M: Model + ?Sized, R: Rng + ?Sized>(
        params: &VariationalParams,
        model: &M,
        x: ArrayView2<'_, f64>,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_mc < 2 {
            return Err(Error::InvalidConfig("credible intervals need n_mc >= 2".into()));
        }
        let preds = PosteriorEnsemble::draw(params, n_mc, rng).predict(model, x)?;
        Ok(Self::from_matrix(preds.view()))
    }

    pub fn from_matrix(samples: ArrayView2<'_, f64>) -> Self {
        let sorted_columns = samples
            .columns()
            .into_iter()
            .map(|c| {
                let mut v = c.to_vec();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        Self { sorted_columns }
    }

    /// Equal-tailed `(α/2, 1 - α/2)` quantile intervals with `α = 1 - level`.
    pub fn intervals(&self, level: f64) -> Vec<Interval> {
        let alpha = 1.0 - level;
        self.sorted_columns
            .iter()
            .map(|col| Interval {
                lo: quantile_sorted(col, alpha / 2.0),
                hi: quantile_sorted(col, 1.0 - alpha / 2.0),
            })
            .collect()
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidParameter {
            name: "level",
            value: level,
            reason: "credible level must lie in [0, 1)",
        });
    }
    Ok(())
}

/// Credible interval for the response mean at `x` from `n_mc` posterior draws.
pub fn credible_interval<M: Model + ?Sized, R: Rng + ?Sized>(
    params: &VariationalParams,
    model: &M,
    x: ArrayView1<'_, f64>,
    level: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Interval> {
    check_level(level)?;
    let row = x.to_owned().insert_axis(ndarray::Axis(0));
    let samples = PredictiveSamples::draw(params, model, row.view(), n_mc, rng)?;
    Ok(samples.intervals(level)[0])
}

/// Percentage of `truths` falling inside their interval.
pub fn coverage_rate(intervals: &[Interval], truths: &[f64]) -> f64 {
    assert_eq!(intervals.len(), truths.len());
    if intervals.is_empty() {
        return 0.0;
    }
    let hits = intervals.iter().zip(truths).filter(|(iv, t)| iv.contains(**t)).count();
    100.0 * hits as f64 / intervals.len() as f64
}

fn default_grid_size() -> usize {
    200
}
fn default_level() -> f64 {
    0.95
}
fn default_n_mc() -> usize {
    600
}
fn default_repeats() -> usize {
    1
}

/// One-coordinate sweeps through a base point on an equidistant grid over [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    /// Zero-based input coordinates to sweep.
    pub coords: Vec<usize>,
    /// Defaults to the zero vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_point: Option<Vec<f64>>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Independent Monte Carlo redraws of the intervals per fitted posterior.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl CoverageConfig {
    pub fn new(coords: Vec<usize>) -> Self {
        Self {
            coords,
            base_point: None,
            grid_size: default_grid_size(),
            level: default_level(),
            n_mc: default_n_mc(),
            repeats: default_repeats(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::InvalidConfig("coverage.coords must not be empty".into()));
        }
        if let Some(&bad) = self.coords.iter().find(|&&c| c >= p) {
            return Err(Error::InvalidConfig(format!("coverage.coords entry {bad} exceeds input dimension {p}")));
        }
        if let Some(base) = &self.base_point {
            if base.len() != p {
                return Err(Error::InvalidConfig(format!(
                    "coverage.base_point has length {}, expected {p}",
                    base.len()
                )));
            }
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidConfig("coverage.grid_size must be at least 2".into()));
        }
        if self.n_mc < 2 {
            return Err(Error::InvalidConfig("coverage.n_mc must be at least 2".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("coverage.repeats must be positive".into()));
        }
        check_level(self.level).map_err(|_| Error::InvalidConfig("coverage.level must lie in [0, 1)".into()))
    }

    /// Query points for sweeping `coord`: the base point with that coordinate on the grid.
    pub fn grid_points(&self, coord: usize, p: usize) -> Array2<f64> {
        let base = self.base_point.clone().unwrap_or_else(|| vec![0.0; p]);
        let mut x = Array2::zeros((self.grid_size, p));
        for (k, mut row) in x.rows_mut().into_iter().enumerate() {
            row.assign(&ArrayView1::from(base.as_slice()));
            row[coord] = -1.0 + 2.0 * k as f64 / (self.grid_size - 1) as f64;
        }
        x
    }
}

/// Average coverage (percent) of `f_0` by the credible intervals, per listed coordinate.
pub fn coverage_experiment<M: Model + ?Sized, R: Rng + ?Sized>(
    params: &VariationalParams,
    model: &M,
    oracle: Option<&Oracle>,
    config: &CoverageConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let oracle = oracle.ok_or(Error::MissingOracle("coverage requires the true regression function"))?;
    let p = model.input_dim();
    config.validate(p)?;
    config
        .coords
        .iter()
        .map(|&coord| {
            let x = config.grid_points(coord, p);
            let truth = oracle.eval(x.view()).to_vec();
            let mut total = 0.0;
            for _ in 0..config.repeats {
                let samples = PredictiveSamples::draw(params, model, x.view(), config.n_mc, rng)?;
                total += coverage_rate(&samples.intervals(config.level), &truth);
            }
            Ok(total / config.repeats as f64)
        })
        .collect()
}

/// `1 - exp(-(f_θ - f_0)² / (8σ²))` averaged over points.
pub fn hellinger_sq_from_predictions(f_theta: ArrayView1<'_, f64>, f0: ArrayView1<'_, f64>, sigma_eps: f64) -> f64 {
    assert_eq!(f_theta.len(), f0.len());
    let denom = 8.0 * sigma_eps * sigma_eps;
    let sum: f64 = f_theta
        .iter()
        .zip(f0.iter())
        .map(|(a, b)| 1.0 - (-(a - b).powi(2) / denom).exp())
        .sum();
    sum / f_theta.len() as f64
}

#[derive(Debug, Clone, Copy)]
pub enum HellingerTarget<'a> {
    Fixed(&'a [f64]),
    /// Average of `d²(P_θ, P_0)` over posterior draws.
    Posterior {
        params: &'a VariationalParams,
        samples: usize,
    },
}

/// Monte Carlo estimate of the squared Hellinger distance to the true law,
/// with `n_mc_x` covariates drawn from the problem's covariate distribution.
pub fn hellinger_sq_estimate<M: Model + ?Sized, R: Rng + ?Sized>(
    target: HellingerTarget<'_>,
    model: &M,
    problem: &Problem,
    sigma_eps: f64,
    n_mc_x: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_mc_x == 0 {
        return Err(Error::InvalidConfig("hellinger estimate needs n_mc_x >= 1".into()));
    }
    let x = problem.sample_covariates(n_mc_x, rng);
    let f0 = problem.oracle.eval(x.view());
    match target {
        HellingerTarget::Fixed(theta) => {
            let f = model.forward(theta, x.view())?;
            Ok(hellinger_sq_from_predictions(f.view(), f0.view(), sigma_eps))
        }
        HellingerTarget::Posterior { params, samples } => {
            if samples == 0 {
                return Err(Error::InvalidConfig("hellinger estimate needs at least one posterior sample".into()));
            }
            let preds = PosteriorEnsemble::draw(params, samples, rng).predict(model, x.view())?;
            let total: f64 = preds
                .rows()
                .into_iter()
                .map(|row| hellinger_sq_from_predictions(row, f0.view(), sigma_eps))
                .sum();
            Ok(total / samples as f64)
        }
    }
}
