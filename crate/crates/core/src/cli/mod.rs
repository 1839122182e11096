//! The `metaperturb` command line: task splitting, meta-training,
//! meta-testing, result tabulation and synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage or data error, 2 training divergence,
//! 3 unreadable checkpoint, 4 bad report input.

mod commands;
mod settings;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{aggregate_summaries, ReportRow};
pub use settings::Settings;

use crate::error::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_REPORT: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_USAGE,
        };
        Self::new(code, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "metaperturb", version, about = "Meta-learned feature perturbation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a dataset into tasks, each with a train and a test file.
    Split(SplitArgs),
    /// Learn the perturbation jointly with one network per task.
    MetaTrain(MetaTrainArgs),
    /// Train a fresh network on a target set with a frozen perturbation and evaluate it.
    MetaTest(MetaTestArgs),
    /// Aggregate summary.json files into mean and std per configuration.
    Report(ReportArgs),
    /// Write a synthetic Gaussian-blob dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitMode {
    Classwise,
    Instancewise,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "classwise")]
    pub mode: SplitMode,
    #[arg(long)]
    pub tasks: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by the training commands; each flag overrides the config file.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// File of `key = value` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Zoo name (conv2, conv4, resnet8) or block string such as C8M-C8M.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub anneal_fraction: Option<f64>,
    #[arg(long)]
    pub disable_noise: bool,
    #[arg(long)]
    pub disable_scale: bool,
    /// all, before_pooling_only, top_half_only, bottom_half_only or none.
    #[arg(long)]
    pub insertion: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MetaTrainArgs {
    /// Directory written by `split`.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetaTestArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub phi: PathBuf,
    /// Normalisation statistics; defaults to norm.json next to the φ file, if present.
    #[arg(long)]
    pub norm: Option<PathBuf>,
    /// MC samples at evaluation.
    #[arg(long)]
    pub mc: Option<usize>,
    #[command(flatten)]
    pub train_flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (containing summary.json) or summary files.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Pool all runs into one row even when their config hashes differ.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.15)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.to_string())),
    };
    match cli.command {
        Command::Split(a) => commands::split(&a),
        Command::MetaTrain(a) => commands::meta_train(&a),
        Command::MetaTest(a) => commands::meta_test(&a),
        Command::Report(a) => commands::report(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

/// [`run`], printing any error and returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests;
