//! Command-line driver: `train`, `eval` and `plot`.
//!
//! Exit codes: 0 on success, 2 for invalid input (config, checkpoint,
//! dimensions), 3 when training aborts, 1 for any other runtime failure.

mod config;
pub mod plot;

pub use config::{config_hash, ExperimentConfig, LoadedConfig};

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::metrics::{eval_points, evaluate, write_eval_csv, EvalReport};
use crate::train::{write_metrics_csv, Trainer};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "FAB_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const PLOT_FILE: &str = "samples.svg";

// rng streams derived from the experiment seed; 0 and 1 belong to the trainer
const FLOW_INIT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const PLOT_STREAM: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "fab", version, about = "Flow annealed importance sampling bootstrap")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow and write checkpoint, metrics and manifest.
    Train {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: ESS, mean log q and the bias study.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Use the large sample counts.
        #[arg(long)]
        paper_scale: bool,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an SVG of flow samples over target contours.
    Plot {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Output file; defaults to `samples.svg` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Written next to every training run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub config_path: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub fab_version: &'static str,
    pub iterations: usize,
    pub artifacts: Vec<String>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::TrainingAborted { .. } => 3,
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::Checkpoint { .. } => 2,
        Error::Io { .. } => 2,
        _ => 1,
    }
}

/// Configures the global thread pool from [`THREADS_ENV`].
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{THREADS_ENV} must be positive")));
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn run_train(config_path: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let loaded = ExperimentConfig::load(config_path)?;
    let cfg = &loaded.config;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let problem = cfg.target.build()?;
    let target = problem.target.as_ref();
    let mut flow = FlowModel::new(target.dim(), &cfg.flow, &mut rng_for(cfg.seed, FLOW_INIT_STREAM))?;
    let points = eval_points(&problem, cfg.train.eval_samples, &mut rng_for(cfg.seed, EVAL_STREAM));
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.ais.clone(), cfg.hmc.clone(), target, cfg.seed)?;
    if let Some(p) = points {
        trainer = trainer.with_eval_points(p);
    }
    log::info!("training {} parameters on {}", flow.num_parameters(), config_path.display());
    let hash = loaded.hash.clone();
    let records = trainer.run(&mut flow, &mut |i, f| {
        f.save_checkpoint(&dir.join(format!("checkpoint-{i:06}.json")), &hash, i)
    })?;

    let ck = dir.join(CHECKPOINT_FILE);
    flow.save_checkpoint(&ck, &loaded.hash, trainer.iteration())?;
    let metrics = dir.join(METRICS_FILE);
    write_metrics_csv(&records, create_file(&metrics)?).map_err(|e| Error::io(&metrics, e))?;
    let manifest = Manifest {
        config_path: loaded.path.clone(),
        config_hash: loaded.hash.clone(),
        seed: cfg.seed,
        fab_version: env!("CARGO_PKG_VERSION"),
        iterations: trainer.iteration(),
        artifacts: vec![CHECKPOINT_FILE.into(), METRICS_FILE.into()],
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(dir)
}

pub fn run_eval(checkpoint: &Path, config_path: &Path, paper_scale: bool, seed: Option<u64>, out: Option<&Path>) -> Result<EvalReport> {
    let loaded = ExperimentConfig::load(config_path)?;
    let cfg = &loaded.config;
    let problem = cfg.target.build()?;
    let flow = FlowModel::load_checkpoint(checkpoint, problem.target.dim())?;
    let eval_cfg = if paper_scale { cfg.eval.clone().paper_scale() } else { cfg.eval.clone() };
    let mut rng = rng_for(seed.unwrap_or(cfg.seed), EVAL_STREAM);
    let report = evaluate(&flow, &problem, &cfg.hmc, &eval_cfg, &mut rng)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let path = dir.join(EVAL_FILE);
    write_eval_csv(&[("flow", &report)], create_file(&path)?).map_err(|e| Error::io(&path, e))?;
    println!("{}", EvalReport::summary_table(&[("flow", &report)]));
    Ok(report)
}

pub fn run_plot(checkpoint: &Path, config_path: &Path, n: usize, out: Option<&Path>) -> Result<PathBuf> {
    let loaded = ExperimentConfig::load(config_path)?;
    let cfg = &loaded.config;
    let problem = cfg.target.build()?;
    let flow = FlowModel::load_checkpoint(checkpoint, problem.target.dim())?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&cfg.output_dir)?;
            cfg.output_dir.join(PLOT_FILE)
        }
    };
    plot::export_scatter(&flow, problem.target.as_ref(), n, &mut rng_for(cfg.seed, PLOT_STREAM), &path)?;
    Ok(path)
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train { config, out } => {
            let dir = run_train(&config, out.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            config,
            paper_scale,
            seed,
            out,
        } => {
            run_eval(&checkpoint, &config, paper_scale, seed, out.as_deref())?;
        }
        Command::Plot { checkpoint, config, n, out } => {
            let path = run_plot(&checkpoint, &config, n, out.as_deref())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
