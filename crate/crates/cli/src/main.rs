//! `rfsq`: train random forests, squash them into multinomial-logistic
//! surrogates, and measure size, accuracy and runtime.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

mod bench;
mod commands;
mod report;
mod source;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use rfsq_core::codec::FloatWidth;
use rfsq_core::forest::LeafSummary;
use rfsq_core::mlr::Optimizer;
use rfsq_core::surrogate::PredictionMode;

use crate::source::Part;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rfsq", version, about = "Random forest squashing via multinomial-logistic leaf routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a random forest and write it as an .rfsq file.
    Train(commands::TrainArgs),
    /// Replace every tree of a forest file with its surrogate.
    Squash(commands::SquashArgs),
    /// Write one prediction per input row.
    Predict(commands::PredictArgs),
    /// Report RMSE, MAE, size and prediction time on labelled data.
    Evaluate(commands::EvaluateArgs),
    /// Sweep a parameter grid, comparing forests with their surrogates.
    Bench(bench::BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CSV path or generator spec (friedman1:n=..,noise=..,seed=.. or axis:...).
    #[arg(long)]
    pub data: String,
    /// Name of the response column in CSV input.
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Which side of the seeded train/test split to use.
    #[arg(long, value_enum, default_value_t = Part::All)]
    pub part: Part,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SummaryArg {
    Mean,
    Median,
}

impl From<SummaryArg> for LeafSummary {
    fn from(s: SummaryArg) -> Self {
        match s {
            SummaryArg::Mean => LeafSummary::Mean,
            SummaryArg::Median => LeafSummary::Median,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Argmax,
    Expectation,
}

impl From<ModeArg> for PredictionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Argmax => PredictionMode::Argmax,
            ModeArg::Expectation => PredictionMode::Expectation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FloatArg {
    F64,
    F32,
}

impl From<FloatArg> for FloatWidth {
    fn from(f: FloatArg) -> Self {
        match f {
            FloatArg::F64 => FloatWidth::F64,
            FloatArg::F32 => FloatWidth::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Auto,
    Newton,
    FirstOrder,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Auto => Optimizer::Auto,
            OptimizerArg::Newton => Optimizer::Newton,
            OptimizerArg::FirstOrder => Optimizer::FirstOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

/// Sizes the rayon pool from `RFSQ_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RFSQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("RFSQ_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Squash(args) => commands::squash(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::Bench(args) => bench::run(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rfsq: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
