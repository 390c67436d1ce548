//! `mcn` command-line front end: dataset generation, auxiliary pretraining,
//! stream training, evaluation, score fusion, gradient checking, λ sweeps
//! and descriptor export.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod format;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mcn", version, about = "Modality compensation network toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `generator.seed` and `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset (dataset.mcnd).
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and freeze the auxiliary encoder (encoder.mcnc).
    PretrainAux {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a source stream (model.mcnc, metrics.csv).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Evaluate a stream checkpoint (eval.csv, probabilities.csv).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Weighted average of per-stream probability files (fused.csv).
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Probability CSVs written by `eval`.
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
        /// Comma-separated stream weights; defaults to `fuse.weights`.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Compare analytic and finite-difference gradients on the probe problem.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// `res_lstm`, `v_lstm` or `all`.
        #[arg(long, default_value = "all")]
        arch: String,
        /// An adaptation level or `all`.
        #[arg(long, default_value = "all")]
        level: String,
    },
    /// Train one stream per λ in `sweep.grid` and keep the best on validation
    /// (sweep.csv, model.mcnc, metrics.csv).
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Write source and auxiliary video-level descriptors (embeddings.csv).
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
