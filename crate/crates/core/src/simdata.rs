//! Seeded generators for the simulation studies.
//!
//! Every generator is a pure function of its spec and seed. A [`Problem`] holds
//! the regression function (and any teacher parameters drawn from the seed) and
//! can emit any number of independent samples from the same law.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{forward, param_count, Activation, Architecture, ParamCoord, ParamKind};

const TEACHER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// The noiseless regression function `f_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Oracle {
    Network { arch: Architecture, theta: Vec<f64> },
    SparseNonlinear,
    Linear { beta: Vec<f64> },
}

impl Oracle {
    pub fn input_dim(&self) -> usize {
        match self {
            Oracle::Network { arch, .. } => arch.input_dim(),
            Oracle::SparseNonlinear => SPARSE_NONLINEAR_DIM,
            Oracle::Linear { beta } => beta.len(),
        }
    }

    pub fn eval(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        match self {
            Oracle::Network { arch, theta } => {
                forward(arch, theta, x).expect("teacher parameters match their architecture")
            }
            Oracle::SparseNonlinear => x.outer_iter().map(|row| sparse_nonlinear(row)).collect(),
            Oracle::Linear { beta } => x.dot(&ArrayView1::from(beta.as_slice())),
        }
    }

    pub fn eval_row(&self, x: ArrayView1<'_, f64>) -> f64 {
        let n = x.len();
        self.eval(x.into_shape_with_order((1, n)).expect("row reshape"))[0]
    }
}

pub const SPARSE_NONLINEAR_DIM: usize = 200;

/// `7 x2 / (1 + x1²) + 5 sin(x3 x4) + 2 x5` on 1-based coordinates.
pub fn sparse_nonlinear(x: ArrayView1<'_, f64>) -> f64 {
    7.0 * x[1] / (1.0 + x[0] * x[0]) + 5.0 * (x[2] * x[3]).sin() + 2.0 * x[4]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// iid U(-1, 1)
    UniformSymmetric,
    StandardNormal,
}

impl CovariateLaw {
    pub fn sample<R: Rng + ?Sized>(self, n: usize, p: usize, rng: &mut R) -> Array2<f64> {
        match self {
            CovariateLaw::UniformSymmetric => {
                let u = Uniform::new(-1.0, 1.0).expect("valid bounds");
                Array2::from_shape_simple_fn((n, p), || u.sample(rng))
            }
            CovariateLaw::StandardNormal => {
                Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(rng))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    TeacherDense,
    TeacherSparse,
    SparseNonlinear,
    ToyLinear,
}

impl GeneratorKind {
    pub fn default_n(self) -> usize {
        match self {
            GeneratorKind::TeacherDense => 3000,
            GeneratorKind::TeacherSparse => 500,
            GeneratorKind::SparseNonlinear => 3000,
            GeneratorKind::ToyLinear => 1000,
        }
    }
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Training sample size; defaults per kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Independent test sample size; defaults to the training size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_n: Option<usize>,
    /// Number of predictors for `toy_linear` (default 200).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, seed: u64) -> Self {
        Self {
            kind,
            n: None,
            test_n: None,
            p: None,
            seed,
            noise_std: 1.0,
        }
    }

    pub fn train_size(&self) -> usize {
        self.n.unwrap_or_else(|| self.kind.default_n())
    }

    pub fn test_size(&self) -> usize {
        self.test_n.unwrap_or_else(|| self.train_size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size() == 0 {
            return Err(Error::InvalidConfig("generator.n must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("generator.noise_std must be non-negative".into()));
        }
        if self.p.is_some() && self.kind != GeneratorKind::ToyLinear {
            return Err(Error::InvalidConfig("generator.p only applies to toy_linear".into()));
        }
        if self.p == Some(0) {
            return Err(Error::InvalidConfig("generator.p must be positive".into()));
        }
        Ok(())
    }

    /// Builds the data-generating law; teacher parameters are drawn from `seed`.
    pub fn problem(&self, seed: u64) -> Result<Problem> {
        self.validate()?;
        let mut p = match self.kind {
            GeneratorKind::TeacherDense => teacher_dense(seed),
            GeneratorKind::TeacherSparse => teacher_sparse(),
            GeneratorKind::SparseNonlinear => sparse_nonlinear_problem(),
            GeneratorKind::ToyLinear => toy_linear(self.p.unwrap_or(200)),
        };
        p.noise_std = self.noise_std;
        Ok(p)
    }

    /// Train and independent test sets for one replication seed.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let problem = self.problem(seed)?;
        let train = problem.sample(self.train_size(), &mut stream(seed, TRAIN_STREAM));
        let test = problem.sample(self.test_size(), &mut stream(seed, TEST_STREAM));
        Ok((train, test))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A data-generating law: covariates, regression function and noise level.
#[derive(Debug, Clone)]
pub struct Problem {
    pub oracle: Oracle,
    pub covariates: CovariateLaw,
    pub noise_std: f64,
    pub true_support: Option<Vec<usize>>,
}

impl Problem {
    pub fn input_dim(&self) -> usize {
        self.oracle.input_dim()
    }

    pub fn sample_covariates<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        self.covariates.sample(n, self.input_dim(), rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let x = self.sample_covariates(n, rng);
        let f0 = self.oracle.eval(x.view());
        let noise: Array1<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                self.noise_std * e
            })
            .collect();
        Dataset {
            x,
            y: f0 + noise,
            true_support: self.true_support.clone(),
            oracle: Some(self.oracle.clone()),
        }
    }
}

/// 20-6-6-1 sigmoid teacher with every parameter drawn from U(0, 1).
pub fn teacher_dense(seed: u64) -> Problem {
    let arch = Architecture::new(20, vec![6, 6], Activation::Sigmoid).expect("valid teacher");
    let mut rng = stream(seed, TEACHER_STREAM);
    let theta: Vec<f64> = (0..param_count(&arch)).map(|_| rng.random::<f64>()).collect();
    Problem {
        oracle: Oracle::Network { arch, theta },
        covariates: CovariateLaw::UniformSymmetric,
        noise_std: 1.0,
        true_support: None,
    }
}

pub const TEACHER_SPARSE_DIM: usize = 100;

/// Fixed 2-2 tanh teacher reading inputs 1 and 2 of a 100-dimensional covariate.
pub fn teacher_sparse() -> Problem {
    let arch = Architecture::new(TEACHER_SPARSE_DIM, vec![2, 2], Activation::Tanh).expect("valid teacher");
    let layout = arch.layout();
    let mut theta = vec![0.0; param_count(&arch)];
    let mut set = |layer: usize, kind: ParamKind, value: f64| {
        let i = layout.index(ParamCoord { layer, kind }).expect("teacher coordinate");
        theta[i] = value;
    };
    let w = |src: usize, dst: usize| ParamKind::Weight { src, dst };
    let b = |unit: usize| ParamKind::Bias { unit };
    for layer in [1, 2] {
        set(layer, w(0, 0), 2.5);
        set(layer, w(0, 1), 2.5);
        set(layer, w(1, 0), 1.5);
        set(layer, w(1, 1), 1.5);
        set(layer, b(0), 1.0);
        set(layer, b(1), -1.0);
    }
    set(3, w(0, 0), 3.0);
    set(3, w(1, 0), 2.0);
    set(3, b(0), 1.0);
    Problem {
        oracle: Oracle::Network { arch, theta },
        covariates: CovariateLaw::UniformSymmetric,
        noise_std: 1.0,
        true_support: Some(vec![0, 1]),
    }
}

pub fn sparse_nonlinear_problem() -> Problem {
    Problem {
        oracle: Oracle::SparseNonlinear,
        covariates: CovariateLaw::StandardNormal,
        noise_std: 1.0,
        true_support: Some((0..5).collect()),
    }
}

/// Linear model with β₅₀ = β₁₀₀ = β₁₅₀ = 10 and β₇₅ = β₁₂₅ = −10 (1-based), zero elsewhere.
pub fn toy_linear(p: usize) -> Problem {
    let mut beta = vec![0.0; p];
    for (j, v) in [(50, 10.0), (100, 10.0), (150, 10.0), (75, -10.0), (125, -10.0)] {
        if j <= p {
            beta[j - 1] = v;
        }
    }
    let support = beta
        .iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(j, _)| j)
        .collect();
    Problem {
        oracle: Oracle::Linear { beta },
        covariates: CovariateLaw::StandardNormal,
        noise_std: 1.0,
        true_support: Some(support),
    }
}

pub fn gen_teacher_dense(n: usize, seed: u64) -> Dataset {
    teacher_dense(seed).sample(n, &mut stream(seed, TRAIN_STREAM))
}

pub fn gen_teacher_sparse(n: usize, seed: u64) -> Dataset {
    teacher_sparse().sample(n, &mut stream(seed, TRAIN_STREAM))
}

pub fn gen_sparse_nonlinear(n: usize, seed: u64) -> Dataset {
    sparse_nonlinear_problem().sample(n, &mut stream(seed, TRAIN_STREAM))
}

pub fn gen_toy_linear(n: usize, p: usize, seed: u64) -> Dataset {
    toy_linear(p).sample(n, &mut stream(seed, TRAIN_STREAM))
}
