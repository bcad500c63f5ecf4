//! Command-line driver: data generation, training, evaluation, ablation
//! sweeps, diagnostics and parameter accounting.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lspt_core::{Result, StrategyKind};

use commands::*;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lspt", version, about = "Prompt tuning on a frozen vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one strategy; writes backbone, bank and metrics into `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<StrategyKind>,
    },
    /// Accuracy of a trained bank; writes the confusion CSV to `--out`.
    Eval {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the backbone file next to the bank.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every strategy × seed cell and tabulate validation accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "vpt-deep,lspt-gspc-only,lspt-lpc-only,lspt")]
        strategy: Vec<StrategyKind>,
        /// `1,2,3` or the inclusive range `1..5`.
        #[arg(long, default_value = "1..5")]
        seeds: String,
    },
    /// Cosine and attention maps for one sample.
    Diagnose {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        /// Recorded in the report index.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trainable and frozen parameter counts of every strategy.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Runs a command and returns what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let n = gen_data(&load(&config, seed)?, &out)?;
            Ok(format!("wrote {n} samples to {}\n", out.display()))
        }
        Command::Train {
            config,
            out,
            seed,
            strategy,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(s) = strategy {
                cfg = cfg.with_strategy(s);
                cfg.validate()?;
            }
            let report = train_run(&cfg, Some(&out))?;
            let last = report.metrics.last();
            Ok(format!(
                "strategy {} trained {} parameters; final train_acc {:.6} val_acc {:.6}\n",
                cfg.train.strategy,
                report.trainable,
                last.map_or(0.0, |m| m.train_acc),
                last.map_or(0.0, |m| m.val_acc)
            ))
        }
        Command::Eval {
            bank,
            data,
            backbone,
            out,
        } => {
            let e = eval(&bank, &data, backbone.as_deref())?;
            let mut text = format!("accuracy {:.6}\n", e.accuracy);
            match out {
                Some(p) => {
                    std::fs::write(&p, e.confusion_csv()).map_err(|err| lspt_core::LsptError::io(&p, err))?
                }
                None => text.push_str(&e.confusion_csv()),
            }
            Ok(text)
        }
        Command::Ablate {
            config,
            out,
            strategy,
            seeds,
        } => {
            let cfg = load(&config, None)?;
            let seeds = parse_seeds(&seeds)?;
            let rows = ablate(&cfg, &strategy, &seeds, &out, threads_from_env()?)?;
            Ok(ablation_csv(&rows))
        }
        Command::Diagnose {
            bank,
            data,
            backbone,
            sample,
            out,
            seed,
        } => {
            let files = diagnose(&bank, &data, backbone.as_deref(), sample, seed, &out)?;
            Ok(format!("wrote {} files to {}\n", files.len(), out.display()))
        }
        Command::ParamCount { config, out } => {
            let table = param_table(&load(&config, None)?)?;
            if let Some(p) = out {
                std::fs::write(&p, &table).map_err(|e| lspt_core::LsptError::io(&p, e))?;
            }
            Ok(table)
        }
    }
}
