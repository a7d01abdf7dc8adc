//! Replicated training runs, λ sweeps and coverage studies with on-disk results.
//!
//! Output layout of one experiment directory:
//!
//! - `resolved.json`: the full config, its hash, resolved λ and seed list
//! - `results.csv` / `results.json`: one row per replication, then `mean` and `sd` rows
//! - `trace_<i>.csv`: per-epoch loss trace of replication `i`
//! - `params_<i>.json`: fitted variational parameters of replication `i`
//! - `timing.csv`: wall-clock seconds per replication (kept apart so reruns are byte-identical)

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use svbnn_core::inference::{coverage_experiment, hellinger_sq_estimate, HellingerTarget};
use svbnn_core::trainer::LossTrace;
use svbnn_core::{fpr_fnr, posterior_mean_predict, rmse, select_inputs, sparsity_hat, train, VariationalParams};

use crate::config::{ExperimentConfig, LambdaSpec, ResolvedConfig};
use crate::table::{mean_sd, write_json, Cell, Table};

/// Stream of the evaluation RNG, kept apart from the data and training streams.
const EVAL_STREAM: u64 = 7;

/// Metrics of one replication. Missing metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub sparsity: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub selected: Option<Vec<usize>>,
    pub coverage: Vec<f64>,
    pub hellinger: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub outcome: Result<ReplicationMetrics, String>,
    pub wall_seconds: f64,
}

/// In-memory view of a finished experiment.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub resolved: ResolvedConfig,
    pub records: Vec<ReplicationRecord>,
    pub dir: PathBuf,
}

impl ExperimentReport {
    pub fn metrics(&self) -> impl Iterator<Item = &ReplicationMetrics> {
        self.records.iter().filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.outcome.is_err()).count()
    }

    fn column(&self, f: impl Fn(&ReplicationMetrics) -> Option<f64>) -> Vec<f64> {
        self.metrics().filter_map(f).collect()
    }

    pub fn train_rmse(&self) -> Vec<f64> {
        self.column(|m| Some(m.train_rmse))
    }

    pub fn test_rmse(&self) -> Vec<f64> {
        self.column(|m| Some(m.test_rmse))
    }

    pub fn sparsity(&self) -> Vec<f64> {
        self.column(|m| Some(m.sparsity))
    }

    /// Coverage of the `k`-th configured coordinate across replications.
    pub fn coverage(&self, k: usize) -> Vec<f64> {
        self.column(|m| m.coverage.get(k).copied())
    }
}

/// Worker-pool size: `SVBNN_JOBS` wins over the flag; otherwise all cores.
pub fn resolve_jobs(flag: Option<usize>) -> usize {
    let env = std::env::var("SVBNN_JOBS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    env.or(flag)
        .filter(|&j| j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Trains and evaluates one replication; writes its trace and parameters.
fn run_replication(
    cfg: &ExperimentConfig,
    resolved: &ResolvedConfig,
    index: usize,
    dir: &Path,
) -> anyhow::Result<ReplicationMetrics> {
    let seed = resolved.seeds[index];
    let fit = cfg.model.build()?;
    let model = fit.as_model();
    let prior = cfg.prior()?;
    let (train_data, test_data) = cfg.generator.generate(seed)?;
    let mut training = cfg.training.clone();
    training.seed = seed;
    let outcome = train(&train_data, model, &prior, &training)?;
    write_trace(&dir.join(format!("trace_{index}.csv")), &outcome.trace, &resolved.config_hash, seed)?;
    write_params(&dir.join(format!("params_{index}.json")), &outcome.params, &resolved.config_hash, seed)?;

    let params = &outcome.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let h = cfg.metrics.predict_samples;
    let train_pred = posterior_mean_predict(params, model, train_data.x.view(), h, &mut rng)?;
    let test_pred = posterior_mean_predict(params, model, test_data.x.view(), h, &mut rng)?;

    let (mut fpr, mut fnr, mut selected) = (None, None, None);
    if cfg.metrics.selection {
        let truth: BTreeSet<usize> = train_data
            .true_support
            .clone()
            .context("selection metrics need a known support")?
            .into_iter()
            .collect();
        let chosen = select_inputs(params, model, 0.5);
        let report = fpr_fnr(&chosen, &truth, model.input_dim())?;
        fpr = Some(report.fpr);
        fnr = Some(report.fnr);
        selected = Some(chosen.into_iter().collect());
    }
    let coverage = match &cfg.metrics.coverage {
        Some(c) => coverage_experiment(params, model, train_data.oracle.as_ref(), c, &mut rng)?,
        None => Vec::new(),
    };
    let hellinger = match &cfg.metrics.hellinger {
        Some(hs) => {
            let problem = cfg.generator.problem(seed)?;
            let target = HellingerTarget::Posterior {
                params,
                samples: hs.samples,
            };
            Some(hellinger_sq_estimate(target, model, &problem, training.sigma_eps, hs.n_mc_x, &mut rng)?)
        }
        None => None,
    };
    Ok(ReplicationMetrics {
        train_rmse: rmse(train_data.y.view(), train_pred.view()),
        test_rmse: rmse(test_data.y.view(), test_pred.view()),
        sparsity: sparsity_hat(params),
        fpr,
        fnr,
        selected,
        coverage,
        hellinger,
    })
}

fn write_trace(path: &Path, trace: &LossTrace, hash: &str, seed: u64) -> anyhow::Result<()> {
    let mut t = Table::new(["config_hash", "seed", "epoch", "neg_elbo", "reconstruction", "kl", "sparsity"]);
    for r in &trace.records {
        t.push(vec![
            Cell::Text(hash.to_string()),
            Cell::Int(seed),
            Cell::Int(r.epoch as u64),
            r.neg_elbo.into(),
            r.reconstruction.into(),
            r.kl.into(),
            r.sparsity.into(),
        ]);
    }
    t.write_csv(path)
}

fn write_params(path: &Path, params: &VariationalParams, hash: &str, seed: u64) -> anyhow::Result<()> {
    write_json(
        path,
        &json!({
            "config_hash": hash,
            "seed": seed,
            "mu": params.mu,
            "sigma": params.sigmas(),
            "phi": params.phis(),
        }),
    )
}

/// Runs every replication of `cfg` on a pool of `jobs` workers and writes the results under
/// `cfg.output_dir`. A failed replication yields a `failed` row; the others are kept.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> anyhow::Result<ExperimentReport> {
    let resolved = cfg.resolve()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("resolved.json"), &serde_json::to_value(&resolved)?)?;
    let staging = dir.join(".staging");
    fs::create_dir_all(&staging)?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    pool.install(|| {
        (0..cfg.replications).into_par_iter().for_each(|i| {
            let start = Instant::now();
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| run_replication(cfg, &resolved, i, &dir)))
                .unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panic".into());
                    Err(anyhow::anyhow!("panicked: {msg}"))
                })
                .map_err(|e| format!("{e:#}"));
            let record = ReplicationRecord {
                replication: i,
                seed: resolved.seeds[i],
                outcome,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            let staged = serde_json::to_vec(&record).expect("record serializes");
            if let Err(e) = fs::write(staging.join(format!("rep_{i}.json")), staged) {
                eprintln!("replication {i}: could not stage result: {e}");
            }
        })
    });

    let records: Vec<ReplicationRecord> = (0..cfg.replications)
        .map(|i| {
            let path = staging.join(format!("rep_{i}.json"));
            fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or(ReplicationRecord {
                    replication: i,
                    seed: resolved.seeds[i],
                    outcome: Err("no result was produced".into()),
                    wall_seconds: 0.0,
                })
        })
        .collect();
    fs::remove_dir_all(&staging).ok();

    let report = ExperimentReport { resolved, records, dir };
    write_results(&report)?;
    Ok(report)
}

fn results_table(report: &ExperimentReport) -> Table {
    let cfg = &report.resolved.config;
    let coords: Vec<usize> = cfg.metrics.coverage.as_ref().map(|c| c.coords.clone()).unwrap_or_default();
    let mut columns: Vec<String> = ["config_hash", "replication", "seed", "status", "train_rmse", "test_rmse", "sparsity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if cfg.metrics.selection {
        columns.push("fpr".into());
        columns.push("fnr".into());
    }
    columns.extend(coords.iter().map(|c| format!("coverage_x{}", c + 1)));
    if cfg.metrics.hellinger.is_some() {
        columns.push("hellinger_sq".into());
    }
    columns.push("message".into());

    let hash = Cell::Text(report.resolved.config_hash.clone());
    let metric_cells = |m: Option<&ReplicationMetrics>| -> Vec<Cell> {
        let mut cells: Vec<Cell> = vec![
            m.map(|m| m.train_rmse).into(),
            m.map(|m| m.test_rmse).into(),
            m.map(|m| m.sparsity).into(),
        ];
        if cfg.metrics.selection {
            cells.push(m.and_then(|m| m.fpr).into());
            cells.push(m.and_then(|m| m.fnr).into());
        }
        for k in 0..coords.len() {
            cells.push(m.and_then(|m| m.coverage.get(k).copied()).into());
        }
        if cfg.metrics.hellinger.is_some() {
            cells.push(m.and_then(|m| m.hellinger).into());
        }
        cells
    };

    let mut table = Table::new(columns);
    for r in &report.records {
        let mut row = vec![hash.clone(), Cell::Int(r.replication as u64), Cell::Int(r.seed)];
        match &r.outcome {
            Ok(m) => {
                row.push("ok".into());
                row.extend(metric_cells(Some(m)));
                row.push(Cell::Empty);
            }
            Err(e) => {
                row.push("failed".into());
                row.extend(metric_cells(None));
                row.push(Cell::Text(e.clone()));
            }
        }
        table.push(row);
    }

    // aggregates over the numeric metric columns of successful rows
    let first_metric = 4;
    let n_metrics = table.columns.len() - first_metric - 1;
    let ok_rows: Vec<&Vec<Cell>> = table.rows.iter().filter(|r| r[3] == Cell::from("ok")).collect();
    let mut means = Vec::with_capacity(n_metrics);
    let mut sds = Vec::with_capacity(n_metrics);
    for c in first_metric..first_metric + n_metrics {
        let vals: Vec<f64> = ok_rows
            .iter()
            .filter_map(|r| match r[c] {
                Cell::Num(v) => Some(v),
                _ => None,
            })
            .collect();
        let (m, s) = mean_sd(&vals);
        means.push(Cell::from(m));
        sds.push(Cell::from(s));
    }
    let note = Cell::Text(format!("{} of {} replications", ok_rows.len(), report.records.len()));
    for (label, cells) in [("mean", means), ("sd", sds)] {
        let mut row = vec![hash.clone(), label.into(), Cell::Empty, "aggregate".into()];
        row.extend(cells);
        row.push(note.clone());
        table.push(row);
    }
    table
}

fn write_results(report: &ExperimentReport) -> anyhow::Result<()> {
    let table = results_table(report);
    table.write_csv(&report.dir.join("results.csv"))?;
    write_json(
        &report.dir.join("results.json"),
        &json!({
            "config_hash": report.resolved.config_hash,
            "seeds": report.resolved.seeds,
            "columns": table.columns,
            "rows": table.json_rows(),
        }),
    )?;
    let mut timing = Table::new(["config_hash", "replication", "seed", "wall_seconds"]);
    for r in &report.records {
        timing.push(vec![
            Cell::Text(report.resolved.config_hash.clone()),
            Cell::Int(r.replication as u64),
            Cell::Int(r.seed),
            r.wall_seconds.into(),
        ]);
    }
    timing.write_csv(&report.dir.join("timing.csv"))
}

/// One point of a λ sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: f64,
    pub report: ExperimentReport,
}

/// Parses a comma-separated λ list; `opt` is allowed.
pub fn parse_lambdas(list: &str) -> anyhow::Result<Vec<LambdaSpec>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            if s == "opt" {
                Ok(LambdaSpec::Opt)
            } else {
                let v: f64 = s.parse().with_context(|| format!("invalid lambda {s:?}"))?;
                if !(v > 0.0 && v < 1.0) {
                    bail!("lambda {s} must lie in (0, 1)");
                }
                Ok(LambdaSpec::Value(v))
            }
        })
        .collect()
}

/// Runs the experiment once per λ under `<output_dir>/lambda_<k>` and writes `sweep.csv`,
/// ordered by increasing λ.
pub fn sweep_lambda(cfg: &ExperimentConfig, lambdas: &[LambdaSpec], jobs: usize) -> anyhow::Result<Vec<SweepPoint>> {
    if lambdas.is_empty() {
        bail!("the lambda list is empty");
    }
    let mut planned: Vec<(f64, ExperimentConfig)> = lambdas
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.prior.lambda = l;
            Ok((c.resolved_lambda()?, c))
        })
        .collect::<anyhow::Result<_>>()?;
    planned.sort_by(|a, b| a.0.total_cmp(&b.0));

    let base = cfg.output_dir.clone();
    fs::create_dir_all(&base)?;
    let mut points = Vec::with_capacity(planned.len());
    for (k, (lambda, mut c)) in planned.into_iter().enumerate() {
        c.output_dir = base.join(format!("lambda_{k}"));
        let report = run_experiment(&c, jobs)?;
        points.push(SweepPoint { lambda, report });
    }

    let mut t = Table::new([
        "lambda",
        "train_rmse_mean",
        "train_rmse_sd",
        "test_rmse_mean",
        "test_rmse_sd",
        "sparsity_mean",
        "config_hash",
        "seeds",
    ]);
    for p in &points {
        let (tr_m, tr_s) = mean_sd(&p.report.train_rmse());
        let (te_m, te_s) = mean_sd(&p.report.test_rmse());
        let (sp_m, _) = mean_sd(&p.report.sparsity());
        let seeds: Vec<String> = p.report.resolved.seeds.iter().map(u64::to_string).collect();
        t.push(vec![
            p.lambda.into(),
            tr_m.into(),
            tr_s.into(),
            te_m.into(),
            te_s.into(),
            sp_m.into(),
            Cell::Text(p.report.resolved.config_hash.clone()),
            Cell::Text(seeds.join(";")),
        ]);
    }
    t.write_csv(&base.join("sweep.csv"))?;
    Ok(points)
}

/// Runs the coverage study configured under `metrics.coverage` and writes `coverage.csv`
/// with the mean and sd of each coordinate's coverage across replications.
pub fn run_coverage(cfg: &ExperimentConfig, jobs: usize) -> anyhow::Result<ExperimentReport> {
    let Some(cov) = cfg.metrics.coverage.clone() else {
        bail!("metrics.coverage must be set for a coverage run");
    };
    let report = run_experiment(cfg, jobs)?;
    let mut t = Table::new([
        "config_hash",
        "seeds",
        "coordinate",
        "level",
        "replications",
        "coverage_mean",
        "coverage_sd",
    ]);
    let seeds: Vec<String> = report.resolved.seeds.iter().map(u64::to_string).collect();
    for (k, &coord) in cov.coords.iter().enumerate() {
        let vals = report.coverage(k);
        let (m, s) = mean_sd(&vals);
        t.push(vec![
            Cell::Text(report.resolved.config_hash.clone()),
            Cell::Text(seeds.join(";")),
            Cell::Text(format!("x{}", coord + 1)),
            cov.level.into(),
            Cell::Int(vals.len() as u64),
            m.into(),
            s.into(),
        ]);
    }
    t.write_csv(&report.dir.join("coverage.csv"))?;
    Ok(report)
}

/// Writes `train.csv`, `test.csv` and a `dataset.json` provenance record for one seed.
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    cfg.generator.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (train_data, test_data) = cfg.generator.generate(cfg.seed)?;
    train_data.write_csv(fs::File::create(dir.join("train.csv"))?)?;
    test_data.write_csv(fs::File::create(dir.join("test.csv"))?)?;
    write_json(
        &dir.join("dataset.json"),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "generator": cfg.generator,
            "train_rows": train_data.len(),
            "test_rows": test_data.len(),
            "true_support": train_data.true_support,
        }),
    )
}
