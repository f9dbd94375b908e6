//! Configuration binding and experiment commands for the `dsd` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::RunOptions;
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "dsd",
    version,
    about = "Dense-sparse-dense training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `harness.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run a single seed instead of `harness.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seeds trained in parallel by `compare`.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Start from a converged dense checkpoint instead of training one.
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dense training to convergence.
    Train(RunArgs),
    /// Dense, sparse and re-dense phases.
    Dsd(RunArgs),
    /// Lowered-learning-rate control with the DSD epoch budget.
    Llr(RunArgs),
    /// DSD and LLR arms over all seeds, with Welch t-tests.
    Compare(RunArgs),
    /// Regenerate histograms and the summary of a finished run.
    Report {
        /// Run directory.
        run_dir: PathBuf,
    },
}

/// Executes a parsed command line; returns the text printed on success.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let (args, which) = match cli.command {
        Command::Report { run_dir } => return report::report(&run_dir),
        Command::Train(a) => (a, "train"),
        Command::Dsd(a) => (a, "dsd"),
        Command::Llr(a) => (a, "llr"),
        Command::Compare(a) => (a, "compare"),
    };
    let cfg = ExperimentConfig::load(&args.config)?;
    let opts = RunOptions {
        out: args.out,
        seed: args.seed,
        jobs: args.jobs,
        from_checkpoint: args.from_checkpoint,
    };
    match which {
        "train" => commands::train(&cfg, &opts).map(|s| report::run_text(&s)),
        "dsd" => commands::dsd(&cfg, &opts).map(|s| report::run_text(&s)),
        "llr" => commands::llr(&cfg, &opts).map(|s| report::run_text(&s)),
        _ => commands::compare(&cfg, &opts).map(|s| report::compare_text(&s)),
    }
}
