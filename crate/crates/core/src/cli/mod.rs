//! Command-line driver: ingest data, train, evaluate, benchmark and report.
//! Every run writes its outputs, the resolved configuration and a manifest
//! under `<out>/<run-id>/`.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

pub use commands::{collect_reports, report_markdown, toy_market, ReportRow, MANIFEST, METRICS, RESOLVED_CONFIG};
pub use config::{BaselineConfig, BenchConfig, DataConfig, Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "marketrl", version, about = "Reinforcement-learning trading experiments")]
pub struct Cli {
    /// TOML run configuration; omitted fields take the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; each run writes to `<out>/<run-id>/`.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name; defaults to `<command>-<seed>`.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute indicators and signals, write the feature panel and split manifest.
    Ingest,
    /// Train one agent on the training split and save its checkpoint.
    Train,
    /// Train (or load `--checkpoint`) and evaluate frozen on the withheld split.
    Backtest {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Walk-forward retrain-and-trade cycles.
    Rolling,
    /// Rolling ensemble of several agents weighted by validation Sharpe.
    Ensemble,
    /// Rollout throughput for each configured number of sub-environments.
    Bench {
        /// Overrides `bench.n_envs`, e.g. `1,4,16,64`.
        #[arg(long, value_delimiter = ',')]
        n_envs: Option<Vec<usize>>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Comparison table (models x metrics) over finished runs.
    Report {
        /// Run directories containing `metrics.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::Backtest { .. } => "backtest",
            Command::Rolling => "rolling",
            Command::Ensemble => "ensemble",
            Command::Bench { .. } => "bench",
            Command::Report { .. } => "report",
        }
    }
}

/// Loads the configuration and applies command-line overrides. Relative
/// data paths resolve against the config file's directory.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let mut c = RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
            let base = p.parent().unwrap_or(Path::new("."));
            for path in [
                &mut c.data.ohlcv,
                &mut c.data.vix,
                &mut c.data.signals,
                &mut c.data.features,
                &mut c.checkpoint,
            ]
            .into_iter()
            .flatten()
            {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
            c
        }
        None => RunConfig::defaults(Profile::default()),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.run_id.is_some() {
        cfg.run_id = cli.run_id.clone();
    }
    match &cli.command {
        Command::Backtest { checkpoint: Some(c) } => cfg.checkpoint = Some(c.clone()),
        Command::Bench {
            n_envs,
            horizon,
            workers,
        } => {
            if let Some(n) = n_envs {
                cfg.bench.n_envs = n.clone();
            }
            if let Some(h) = horizon {
                cfg.bench.horizon = *h;
            }
            if let Some(w) = workers {
                cfg.bench.workers = *w;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

/// Runs the parsed command and returns the run directory.
pub fn run(cli: &Cli) -> anyhow::Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Ingest => commands::ingest(&cfg, out),
        Command::Train => commands::train(&cfg, out),
        Command::Backtest { .. } => commands::backtest(&cfg, out),
        Command::Rolling => commands::rolling(&cfg, out),
        Command::Ensemble => commands::ensemble(&cfg, out),
        Command::Bench { .. } => commands::bench(&cfg, out),
        Command::Report { runs } => commands::report(&cfg, runs, out),
    }
}
