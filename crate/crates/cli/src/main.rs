//! `semtraj`: simulate, train, score, evaluate, transfer and ablate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "semtraj",
    version,
    about = "Outlier detection for human semantic trajectories"
)]
pub struct Cli {
    /// Override the configured seed everywhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for simulation and scoring; 1 keeps runs bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Sequence encoder: mlp, rnn, cnn or transformer.
    #[arg(long, global = true)]
    pub arch: Option<String>,
    /// Drop one channel: none, no-semantic, no-spatial or no-temporal.
    #[arg(long, global = true)]
    pub ablate: Option<String>,
    /// Override any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic check-in dataset with ground-truth labels.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model; writes the checkpoint, `<out>.log.jsonl` and `<out>.timing.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every user of a dataset.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Must agree with the checkpoint on every model key.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Metrics report for a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Dataset the scores came from; adds the distance baseline.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training timing file to include in the report.
        #[arg(long)]
        timings: Option<PathBuf>,
        /// Configuration for reports on score files without provenance.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a model on a dataset it was not trained on.
    Transfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to `labels.csv` in the data directory.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Model trained on the target data; its metrics become the `original` rows.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
    /// Train, score and evaluate one model per ablation variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "none,no-semantic,no-spatial,no-temporal")]
        variants: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cmd = Cli::command().after_long_help(semtraj_core::config::key_help());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
