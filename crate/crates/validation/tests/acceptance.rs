//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Run alone with `cargo test -p svbnn-validation --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svbnn_cli::{resolve_jobs, run_coverage, run_experiment, sweep_lambda, ExperimentConfig, LambdaSpec};
use svbnn_core::network::loss_gradient;
use svbnn_core::simdata::teacher_sparse;
use svbnn_core::spikeslab::{gumbel_softmax_sample, kl_bernoulli, kl_gaussian, kl_total, ParamGradients};
use svbnn_core::trainer::{elbo_gradient_with_draws, soft_surrogate, Draws, Minibatch};
use svbnn_core::{
    Activation, Architecture, Dataset, Model, Reparameterization, SpikeSlabPrior, Temperature, VariationalParams,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn load(name: &str, out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut cfg = ExperimentConfig::load(&path).expect("config loads");
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Teacher-B fits shared by criteria 1 and 4: seeds 0..9 with the x₁ coverage study.
fn teacher_b_runs(out: &Path, jobs: usize) -> svbnn_cli::ExperimentReport {
    let mut cfg = load("sim1_sparse.json", out);
    cfg.replications = 10;
    let cov = cfg.metrics.coverage.as_mut().expect("sim1_sparse configures coverage");
    cov.coords = vec![0];
    cov.grid_size = 200;
    cov.n_mc = 600;
    cfg.metrics.hellinger = None;
    run_coverage(&cfg, jobs).expect("teacher-B experiment runs")
}

fn criterion_1(report: &svbnn_cli::ExperimentReport) -> Verdict {
    let first: Vec<_> = report.records.iter().take(5).collect();
    let metrics: Vec<_> = first.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    if metrics.len() < 5 {
        return verdict(false, format!("{} of 5 replications failed", 5 - metrics.len()));
    }
    let test: Vec<f64> = metrics.iter().map(|m| m.test_rmse).collect();
    let sparsity: Vec<f64> = metrics.iter().map(|m| 100.0 * m.sparsity).collect();
    let exact = metrics
        .iter()
        .filter(|m| m.fpr == Some(0.0) && m.fnr == Some(0.0))
        .count();
    let pass = test.iter().all(|&r| r <= 1.10) && exact >= 4 && sparsity.iter().all(|&s| s <= 5.0);
    verdict(
        pass,
        format!("test RMSE {} (<= 1.10), exact selection {exact}/5 (>= 4), sparsity % {} (<= 5)", fmt(&test), fmt(&sparsity)),
    )
}

fn criterion_2(out: &Path, jobs: usize) -> Verdict {
    let cfg = load("sim2.json", out);
    let report = run_experiment(&cfg, jobs).expect("simulation II runs");
    if report.failures() > 0 {
        return verdict(false, format!("{} replications failed", report.failures()));
    }
    let test = report.test_rmse();
    let fpr: Vec<f64> = report.metrics().filter_map(|m| m.fpr).collect();
    let fnr: Vec<f64> = report.metrics().filter_map(|m| m.fnr).collect();
    let s = 100.0 * mean(&report.sparsity());
    let pass = mean(&test) <= 1.50 && mean(&fpr) <= 2.0 && mean(&fnr) <= 40.0 && s <= 6.0;
    verdict(
        pass,
        format!(
            "mean test RMSE {:.3} (<= 1.50) {}, mean FPR {:.2}% (<= 2), mean FNR {:.1}% (<= 40), mean sparsity {s:.2}% (<= 6)",
            mean(&test),
            fmt(&test),
            mean(&fpr),
            mean(&fnr)
        ),
    )
}

fn criterion_3(out: &Path, jobs: usize) -> Verdict {
    let mut cfg = load("sim1_sparse.json", out);
    cfg.replications = 3;
    cfg.metrics.coverage = None;
    cfg.metrics.hellinger = None;
    let lambdas = [
        LambdaSpec::Value(1e-100),
        LambdaSpec::Value(1e-20),
        LambdaSpec::Opt,
        LambdaSpec::Value(0.5),
        LambdaSpec::Value(0.99),
    ];
    let points = sweep_lambda(&cfg, &lambdas, jobs).expect("sweep runs");
    let opt = cfg.resolved_lambda().unwrap();
    let test: Vec<f64> = points.iter().map(|p| mean(&p.report.test_rmse())).collect();
    let train: Vec<f64> = points.iter().map(|p| mean(&p.report.train_rmse())).collect();
    let k = points.iter().position(|p| p.lambda == opt).expect("opt is in the sweep");
    let u_shape = test[k] < test[0] && test[k] < *test.last().unwrap();
    let monotone = train.windows(2).all(|w| w[1] <= w[0] + 0.02);
    verdict(
        u_shape && monotone,
        format!("test RMSE by increasing lambda {}, train RMSE {}", fmt(&test), fmt(&train)),
    )
}

fn criterion_4(report: &svbnn_cli::ExperimentReport) -> Verdict {
    let cov = report.coverage(0);
    let m = mean(&cov);
    verdict(
        cov.len() == 10 && (90.0..=100.0).contains(&m),
        format!("x1 coverage {m:.2}% over {} fits (in [90, 100])", cov.len()),
    )
}

fn criterion_5(out: &Path) -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for (label, reparam) in [
        ("gumbel_softmax", Reparameterization::GumbelSoftmax),
        ("inverse_cdf", Reparameterization::InverseCdf),
    ] {
        let mut cfg = load("toy_linear.json", &out.join(label));
        cfg.training.reparameterization = reparam;
        let start = Instant::now();
        let report = run_experiment(&cfg, 1).expect("toy linear runs");
        let secs = start.elapsed().as_secs_f64();
        let text = std::fs::read_to_string(report.dir.join("params_0.json")).expect("parameters written");
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let take = |k: &str| -> Vec<f64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
        let (mu, phi) = (take("mu"), take("phi"));
        let means: Vec<f64> = mu.iter().zip(&phi).map(|(m, p)| m * p).collect();
        let truth = [(49, 10.0), (74, -10.0), (99, 10.0), (124, -10.0), (149, 10.0)];
        let signal: Vec<f64> = truth.iter().map(|&(j, _)| means[j]).collect();
        let signal_ok = truth.iter().all(|&(j, b)| (means[j] - b).abs() <= 1.0);
        let max_null = (0..means.len())
            .filter(|j| !truth.iter().any(|&(t, _)| t == *j))
            .map(|j| means[j].abs())
            .fold(0.0, f64::max);
        let ok = signal_ok && max_null < 0.5 && secs <= 120.0;
        pass &= ok;
        lines.push(format!("{label}: signal {} max |null| {max_null:.3} ({secs:.1}s)", fmt(&signal)));
    }
    verdict(pass, lines.join("; "))
}

fn small_dataset(p: usize, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let y = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    Dataset::new(x, y).unwrap()
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = Architecture::new(3, vec![4], Activation::Tanh).unwrap();
    let t = arch.param_count();
    let data = small_dataset(3, 8, &mut rng);
    let prior = SpikeSlabPrior::new(2.0, 0.05).unwrap();
    let params = VariationalParams::new(
        (0..t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..t).map(|_| rng.random_range(-2.0..0.0)).collect(),
        (0..t).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let mut config = svbnn_core::TrainingConfig::new(8, 1);
    config.mc_samples = 2;
    let draws = Draws::sample(t, 2, &mut rng);
    let batch = Minibatch {
        n_total: 40,
        ..Minibatch::full(&data)
    };
    let g = elbo_gradient_with_draws(&arch, &params, &prior, batch, &config, &draws).unwrap();
    let value = |p: &VariationalParams| soft_surrogate(&arch, p, &prior, batch, &config, &draws).unwrap().total;
    let h = 1e-6;
    let mut fd = ParamGradients::zeros(t);
    for i in 0..t {
        for block in 0..3 {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            let (a, b, slot) = match block {
                0 => (&mut plus.mu[i], &mut minus.mu[i], &mut fd.mu[i]),
                1 => (&mut plus.sigma_raw[i], &mut minus.sigma_raw[i], &mut fd.sigma_raw[i]),
                _ => (&mut plus.phi_raw[i], &mut minus.phi_raw[i], &mut fd.phi_raw[i]),
            };
            *a += h;
            *b -= h;
            *slot = (value(&plus) - value(&minus)) / (2.0 * h);
        }
    }
    let elbo_rel = g
        .iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-2))
        .fold(0.0, f64::max);

    let mut loss_rel: f64 = 0.0;
    for act in [Activation::Tanh, Activation::Sigmoid] {
        let arch = Architecture::new(3, vec![4, 3], act).unwrap();
        let theta: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = small_dataset(3, 8, &mut rng);
        let g = loss_gradient(&arch, &theta, data.x.view(), data.y.view(), 0.7).unwrap();
        let loss = |th: &[f64]| arch.nll_gradient(th, data.x.view(), data.y.view(), 0.7).unwrap().0;
        for i in 0..theta.len() {
            let (mut plus, mut minus) = (theta.clone(), theta.clone());
            plus[i] += 1e-6;
            minus[i] -= 1e-6;
            let fd = (loss(&plus) - loss(&minus)) / 2e-6;
            loss_rel = loss_rel.max((g[i] - fd).abs() / fd.abs().max(1e-2));
        }
    }
    verdict(
        elbo_rel < 1e-4 && loss_rel < 1e-5,
        format!("elbo gradient max rel {elbo_rel:.2e} (< 1e-4), loss gradient max rel {loss_rel:.2e} (< 1e-5)"),
    )
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn gaussian_kl_quadrature(mu: f64, sigma: f64, sigma0_sq: f64) -> f64 {
    let q = |x: f64| normal_pdf(x, mu, sigma * sigma);
    let log_ratio = |x: f64| {
        let z = (x - mu) / sigma;
        -0.5 * z * z - sigma.ln() + 0.5 * x * x / sigma0_sq + 0.5 * sigma0_sq.ln()
    };
    simpson(|x| q(x) * log_ratio(x), mu - 14.0 * sigma, mu + 14.0 * sigma, 4000)
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let phi: f64 = rng.random_range(0.001..0.999);
        let lambda: f64 = rng.random_range(0.001..0.999);
        let direct = phi * (phi / lambda).ln() + (1.0 - phi) * ((1.0 - phi) / (1.0 - lambda)).ln();
        worst = worst.max((kl_bernoulli(phi, lambda) - direct).abs());

        let mu = rng.random_range(-3.0..3.0);
        let sigma = rng.random_range(0.05..3.0);
        let s0 = rng.random_range(0.5..5.0);
        worst = worst.max((kl_gaussian(mu, sigma, s0) - gaussian_kl_quadrature(mu, sigma, s0)).abs());

        let t = 4;
        let params = VariationalParams::new(
            (0..t).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..t).map(|_| rng.random_range(-3.0..1.0)).collect(),
            (0..t).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let prior = SpikeSlabPrior::new(s0, lambda).unwrap();
        // Atom part in closed form plus the slab part by quadrature of the mixture densities.
        let oracle: f64 = (0..t)
            .map(|i| {
                let (m, s, f) = (params.mu[i], params.sigma(i), params.phi(i));
                let atom = (1.0 - f) * ((1.0 - f) / (1.0 - lambda)).ln();
                let slab = simpson(
                    |x| {
                        let q = f * normal_pdf(x, m, s * s);
                        let p = lambda * normal_pdf(x, 0.0, s0);
                        if q > 0.0 { q * (q / p).ln() } else { 0.0 }
                    },
                    m - 14.0 * s,
                    m + 14.0 * s,
                    4000,
                );
                atom + slab
            })
            .sum();
        worst = worst.max((kl_total(&params, &prior) - oracle).abs());
    }
    verdict(worst < 1e-3, format!("max abs error {worst:.2e} over 100 draws (< 1e-3)"))
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for tau in [0.5, 0.1] {
        let tau = Temperature::any_positive(tau).unwrap();
        for phi in [0.1, 0.3, 0.7, 0.9] {
            let hits = (0..draws)
                .filter(|_| gumbel_softmax_sample(phi, tau, rng.sample(rand::distr::Open01)).unwrap() > 0.5)
                .count();
            let se = (phi * (1.0 - phi) / draws as f64).sqrt();
            worst = worst.max((hits as f64 / draws as f64 - phi).abs() / se);
        }
    }
    verdict(worst <= 3.0, format!("max deviation {worst:.2} standard errors (<= 3)"))
}

fn criterion_9() -> Verdict {
    let oracle = teacher_sparse().oracle;
    let f0 = oracle.eval_row(Array1::zeros(oracle.input_dim()).view());
    verdict((f0 + 1.36).abs() <= 1e-3, format!("f(0) = {f0:.6} (-1.3600 +/- 1e-3)"))
}

fn main() {
    let root: PathBuf = tempfile::tempdir().expect("scratch directory").keep();
    let jobs = resolve_jobs(None);
    let mut results: Vec<(usize, Verdict, f64)> = Vec::new();
    let mut timed = |n: usize, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {n}: {} ({secs:.0}s) {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v, secs));
    };

    timed(9, &mut criterion_9);
    timed(8, &mut criterion_8);
    timed(7, &mut criterion_7);
    timed(6, &mut criterion_6);
    timed(5, &mut || criterion_5(&root.join("toy")));
    let start = Instant::now();
    let teacher = teacher_b_runs(&root.join("teacher_b"), jobs);
    println!("teacher-B fits: {:.0}s", start.elapsed().as_secs_f64());
    timed(1, &mut || criterion_1(&teacher));
    timed(4, &mut || criterion_4(&teacher));
    timed(3, &mut || criterion_3(&root.join("sweep"), jobs));
    timed(2, &mut || criterion_2(&root.join("sim2"), jobs));

    results.sort_by_key(|r| r.0);
    println!();
    println!("acceptance summary");
    for (n, v, _) in &results {
        println!("{} criterion {n}", if v.pass { "PASS" } else { "FAIL" });
    }
    let _ = std::fs::remove_dir_all(&root);
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

