use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use frcl_bench::metrics::{read_metrics, MetricsRecord};
use frcl_bench::scoring::{score_boundaries, DEFAULT_TOLERANCE};
use frcl_bench::{run_experiment, ExperimentConfig, RunOptions};
use frcl_core::engine::read_manifest;
use frcl_core::TaskSummary;

#[derive(Parser)]
#[command(name = "frcl", about = "Functional-regularised continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Seed of the first repetition.
        #[arg(long)]
        seed: Option<u64>,
        /// Train on training and validation data, test on the test set.
        #[arg(long = "final")]
        final_protocol: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a task-summary file or a checkpoint directory.
    InspectSummary { path: PathBuf },
    /// Score detected boundaries recorded in a metrics stream.
    ScoreBoundaries {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: u64,
    },
}

fn describe(path: &Path) -> anyhow::Result<()> {
    let s = TaskSummary::read_checkpoint(BufReader::new(File::open(path)?))
        .with_context(|| format!("reading {}", path.display()))?;
    println!("{}: task {} with {} inducing inputs of width {}, {:?}", path.display(), s.task_id(), s.m(), s.z().cols(), s.likelihood());
    for (c, f) in s.functions().iter().enumerate() {
        let mean = f.mu_u.iter().sum::<f64>() / f.mu_u.len() as f64;
        let var = f.cov_u.trace() / s.m() as f64;
        println!("  function {c}: mean of u {mean:.4}, mean variance {var:.4}, log det {:.3}", f.logdet_cov_u);
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, seed, final_protocol, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_experiment(&cfg, &RunOptions { seed, final_protocol, out_dir: out })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::InspectSummary { path } => {
            if path.is_dir() {
                let m = read_manifest(&path)?;
                println!("mode={:?} step={} task_count={} seed={}", m.mode, m.step, m.task_count, m.seed);
                for t in 0..m.task_count {
                    describe(&path.join(format!("summary_{t:03}.bin")))?;
                }
            } else {
                describe(&path)?;
            }
        }
        Command::ScoreBoundaries { metrics, tolerance } => {
            let records = read_metrics(&metrics)?;
            let detections: Vec<u64> = records
                .iter()
                .filter_map(|r| match r {
                    MetricsRecord::Detection { step, .. } => Some(*step),
                    _ => None,
                })
                .collect();
            let Some(truth) = records.iter().find_map(|r| match r {
                MetricsRecord::Final { true_boundaries, .. } => Some(true_boundaries.clone()),
                _ => None,
            }) else {
                bail!("{} has no final record with the true boundaries", metrics.display());
            };
            println!("{}", serde_json::to_string_pretty(&score_boundaries(&truth, &detections, tolerance))?);
        }
    }
    Ok(())
}
