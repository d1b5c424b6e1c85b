//! `ttpp` command-line harness: synthetic data, training, evaluation,
//! ablation grids, attention dumps and parameter counts.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ttpp::metrics::Metric;

pub mod commands;
pub mod config;
pub mod outputs;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ttpp", version, about = "Train and evaluate action anticipation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Same as `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Same as `--set output_dir=DIR`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse().map_err(|e: ttpp::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test feature files under `data.dir`.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the CSV text format instead of binary.
        #[arg(long)]
        csv: bool,
    },
    /// Train one model; writes checkpoint, history and manifest to `output_dir`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split and write a per-horizon report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "acc", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every aggregator × predictor pair plus TTM-PPM without feature feedback.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "acc", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Per-head attention weights for every anchor of the test sequences.
    DumpAttention {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only the first N test sequences.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Closed-form parameter counts for every model at the given widths.
    ParamCount {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated d_model values (default: the config's).
        #[arg(long, value_delimiter = ',')]
        d_model: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Gen { config, csv } => commands::gen(&config.resolve()?, *csv),
        Command::Train { config } => commands::train_run(&config.resolve()?),
        Command::Eval {
            config,
            checkpoint,
            metric,
            out,
        } => commands::eval(&config.resolve()?, checkpoint.as_deref(), *metric, out.as_deref()),
        Command::Grid {
            config,
            metric,
            out,
            threads,
        } => commands::grid(&config.resolve()?, *metric, out.as_deref(), *threads),
        Command::DumpAttention {
            config,
            checkpoint,
            out,
            limit,
        } => commands::dump_attention(&config.resolve()?, checkpoint.as_deref(), out.as_deref(), *limit),
        Command::ParamCount { config, d_model, out } => {
            commands::param_count_cmd(&config.resolve()?, d_model, out.as_deref())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
