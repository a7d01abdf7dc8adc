use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use svbnn_cli::table::mean_sd;
use svbnn_cli::{
    generate_data, parse_lambdas, resolve_jobs, run_coverage, run_experiment, sweep_lambda, ExperimentConfig,
    ExperimentReport,
};

#[derive(Parser)]
#[command(name = "svbnn", version, about = "Sparse variational Bayesian neural network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Pool {
    /// Replication count; overrides the config.
    #[arg(long)]
    replications: Option<usize>,
    /// Worker threads (SVBNN_JOBS takes precedence).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test CSV files for the configured generator.
    Generate(Common),
    /// Single training run at the base seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Replicated training runs.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pool: Pool,
    },
    /// One experiment per prior inclusion probability.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pool: Pool,
        /// Comma-separated values in (0, 1); `opt` selects the default.
        #[arg(long, allow_hyphen_values = true)]
        lambdas: String,
    },
    /// Credible-interval coverage study.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pool: Pool,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply(cfg: &mut ExperimentConfig, pool: &Pool) -> usize {
    if let Some(r) = pool.replications {
        cfg.replications = r;
    }
    resolve_jobs(pool.jobs)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn summarize(report: &ExperimentReport) {
    let (tr, _) = mean_sd(&report.train_rmse());
    let (te, te_sd) = mean_sd(&report.test_rmse());
    let (sp, _) = mean_sd(&report.sparsity());
    println!(
        "{}: {} replications ({} failed), train RMSE {}, test RMSE {} ± {}, sparsity {}",
        report.dir.display(),
        report.records.len(),
        report.failures(),
        fmt(tr),
        fmt(te),
        fmt(te_sd),
        fmt(sp),
    );
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(common) => {
            let cfg = load(&common)?;
            let dir = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            generate_data(&cfg, &dir)?;
            println!("wrote {}", dir.display());
        }
        Command::Train { common } => {
            let mut cfg = load(&common)?;
            cfg.replications = 1;
            summarize(&run_experiment(&cfg, 1)?);
        }
        Command::Experiment { common, pool } => {
            let mut cfg = load(&common)?;
            let jobs = apply(&mut cfg, &pool);
            summarize(&run_experiment(&cfg, jobs)?);
        }
        Command::SweepLambda { common, pool, lambdas } => {
            let mut cfg = load(&common)?;
            let jobs = apply(&mut cfg, &pool);
            let lambdas = parse_lambdas(&lambdas).context("--lambdas")?;
            for point in sweep_lambda(&cfg, &lambdas, jobs)? {
                print!("lambda {:e}: ", point.lambda);
                summarize(&point.report);
            }
            println!("wrote {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Coverage { common, pool } => {
            let mut cfg = load(&common)?;
            let jobs = apply(&mut cfg, &pool);
            let report = run_coverage(&cfg, jobs)?;
            summarize(&report);
            println!("wrote {}", report.dir.join("coverage.csv").display());
        }
    }
    Ok(())
}
