//! `skelgait`: synthetic data generation, fusion, training and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{RunConfig, CONFIG_ENV};
use skelgait::geometry::ChainMode;
use skelgait::protocol::Metric;

#[derive(Parser)]
#[command(name = "skelgait", version, about = "Skeleton gait recognition toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads used for embedding extraction
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    calibration: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    chain_mode: Option<ChainArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChainArg {
    Paper,
    Strict,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with manifest and calibration
    GenSynth {
        #[arg(long)]
        n_ids: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Align and fuse per-device sequences into optimized-joint sequences
    Fuse {
        /// Per-device skeleton sequence files
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train on the training split of the manifest
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Rank-1 gallery/probe evaluation on the test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Print the trainable parameter count of the configured model
    Params,
    /// Write one embedding row per manifest sequence
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::Fuse { .. } => "fuse",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Params => "params",
            Command::ExportEmbeddings { .. } => "export-embeddings",
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(m) = &g.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(c) = &g.calibration {
        cfg.paths.calibration = Some(c.clone());
    }
    if let Some(o) = &g.output_dir {
        cfg.paths.output_dir = Some(o.clone());
    }
    if let Some(m) = g.chain_mode {
        cfg.pipeline.chain_mode = match m {
            ChainArg::Paper => ChainMode::Paper,
            ChainArg::Strict => ChainMode::Strict,
        };
    }
    match &cli.command {
        Command::GenSynth { n_ids, reps } => {
            cfg.synth.n_ids = n_ids.unwrap_or(cfg.synth.n_ids);
            cfg.synth.reps = reps.unwrap_or(cfg.synth.reps);
        }
        Command::Train { iterations, p, k } => {
            cfg.train.iterations = iterations.unwrap_or(cfg.train.iterations);
            cfg.train.batch.p = p.unwrap_or(cfg.train.batch.p);
            cfg.train.batch.k = k.unwrap_or(cfg.train.batch.k);
        }
        Command::Eval { metric: Some(m), .. } => {
            cfg.eval.metric = match m {
                MetricArg::Euclidean => Metric::Euclidean,
                MetricArg::Cosine => Metric::Cosine,
            };
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenSynth { .. } => commands::gen_synth(&cfg),
        Command::Fuse { inputs } => commands::fuse(&cfg, inputs),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { checkpoint, .. } => commands::eval(&cfg, checkpoint),
        Command::Params => commands::params(&cfg),
        Command::ExportEmbeddings { checkpoint } => commands::export_embeddings(&cfg, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "command": cli.command.name(),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
