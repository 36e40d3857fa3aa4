//! `breechmark`: synthetic data, preprocessing, contrastive training, CMC
//! scoring and evaluation reports, driven by one TOML run configuration.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "breechmark", version, about = "Breech-face similarity: contrastive embeddings and congruent matching cells")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Override `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the global `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "BREECHMARK_THREADS")]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreMethod {
    Contrastive,
    Cmc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by [synth].
    Synth,
    /// Read a raw-scan manifest (x3p or internal files) and store the scans internally.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Name of the written manifest (default: the input's file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Level, isolate, filter and resample scans into CMC rasters and polar images.
    Preprocess {
        /// Raw-scan manifests (default: configured manifests, else the synth split).
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Train the contrastive model, recording held-out ROC AUC.
    Train {
        /// Preprocessed training manifest (default: preprocessed/train.csv).
        #[arg(long = "train")]
        train_manifest: Option<PathBuf>,
        /// Preprocessed held-out manifest (default: preprocessed/eval.csv).
        #[arg(long = "eval")]
        eval_manifest: Option<PathBuf>,
    },
    /// Write embeddings of a preprocessed manifest.
    Embed {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score every pair of a preprocessed manifest.
    Score {
        #[arg(long, value_enum)]
        method: ScoreMethod,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Model for contrastive scoring (default: train/best.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// ROC curves, AUCs and (for two sets) a scatter of score CSVs.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
    },
    /// Summary table, ROC overlay, histograms and scatter from stored scores.
    Report {
        /// Score CSVs (default: scores/contrastive.csv and scores/cmc.csv).
        #[arg(long, num_args = 1..)]
        scores: Vec<PathBuf>,
        /// Training summary (default: train/summary.json when present).
        #[arg(long)]
        train_summary: Option<PathBuf>,
    },
    /// Time CMC on a scan set and project the full all-pairs run.
    BenchCmc {
        /// Preprocessed manifest (default: preprocessed synthetic scans from [synth]).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Pairs to time, spread evenly over all pairs (default: all).
        #[arg(long)]
        pairs: Option<usize>,
        /// Worker count to project the full run onto.
        #[arg(long, default_value_t = 8)]
        project_workers: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.sets)?;
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let workers = match g.workers {
        Some(0) => return Err(UsageError("--workers must be >= 1".into()).into()),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // a global pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    match cli.command {
        Command::Synth => commands::synth(&cfg, workers),
        Command::Ingest { manifest, name } => commands::ingest(&cfg, workers, &manifest, name),
        Command::Preprocess { manifests } => commands::preprocess(&cfg, workers, &manifests),
        Command::Train {
            train_manifest,
            eval_manifest,
        } => commands::train(&cfg, workers, train_manifest, eval_manifest),
        Command::Embed { manifest, checkpoint } => commands::embed(&cfg, workers, manifest, checkpoint),
        Command::Score {
            method,
            manifest,
            checkpoint,
        } => commands::score(&cfg, workers, method, manifest, checkpoint),
        Command::Evaluate { scores } => commands::evaluate(&cfg, workers, &scores),
        Command::Report { scores, train_summary } => commands::report(&cfg, workers, scores, train_summary),
        Command::BenchCmc {
            manifest,
            pairs,
            project_workers,
        } => commands::bench_cmc(&cfg, workers, manifest, pairs, project_workers),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
