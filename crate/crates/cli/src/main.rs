//! `fxq`: batch driver for the fixed-point quantization toolkit.
//!
//! Exit status: 0 on success, 1 when a verification suite or a computation
//! fails, 2 on bad flags or unusable inputs.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const OUT_ENV: &str = "FXQ_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "fxq",
    version,
    about = "Fixed-point 8-bit quantization toolkit"
)]
pub struct Cli {
    /// Seed for every random draw made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for artifacts.
    #[arg(long, global = true, env = OUT_ENV, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Relative quantization error of Gaussian data for every FL.
    StatsSweep(SweepArgs),
    /// σ at which the best FL drops below each value, with a log-linear fit.
    StatsThresholds(SweepArgs),
    /// Freeze a model (calibrating it if needed), compile it to an integer
    /// program and export quantized test inputs.
    Quantize(QuantizeArgs),
    /// Choose fractional lengths by calibration loss.
    GridSearch(GridSearchArgs),
    /// Train a toy model, full precision or quantization-aware.
    Train(TrainArgs),
    /// Grid search then a short quantization-aware fine-tune of a float model.
    Finetune(FinetuneArgs),
    /// Run a compiled program on a tensor file.
    Infer(InferArgs),
    /// Fusion-equivalence, private-FL identity and integer-only checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Signed data and formats (default: rectified data, unsigned formats).
    #[arg(long)]
    pub signed: bool,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_min: f64,
    /// Defaults to 40 when signed, 100 when unsigned.
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub word_length: u8,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long, default_value_t = 8000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub test_size: usize,
    /// Seed of the synthetic task (templates and samples).
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Model file. Unfrozen models are calibrated and frozen first.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of test images written as `inputs.fxqt`.
    #[arg(long, default_value_t = 100)]
    pub export_inputs: usize,
    #[arg(long, default_value_t = 512)]
    pub calib_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct GridSearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Candidate FLs: a range `lo-hi` or a list `a,b,c`.
    #[arg(long, default_value = "0-8")]
    pub fl_space: String,
    #[arg(long, default_value_t = 512)]
    pub calib_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Float,
    Qat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Linear,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub no_nesterov: bool,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub no_decay_bn: bool,
    #[arg(long)]
    pub no_decay_depthwise: bool,
    #[arg(long)]
    pub no_decay_alpha: bool,
    #[arg(long)]
    pub fl_momentum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "residual_cnn")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Qat)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Trained full-precision model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "0-8")]
    pub fl_space: String,
    #[arg(long, default_value_t = 512)]
    pub calib_size: usize,
    /// Standardize images and quantize them to a searched signed format.
    #[arg(long)]
    pub normalize_input: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub program: PathBuf,
    /// Tensor file with the program's input format.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Frozen model to check. Without it a toy model is calibrated and frozen.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "residual_cnn")]
    pub arch: String,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Points in the private-FL identity grid.
    #[arg(long, default_value_t = 10_000)]
    pub grid: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Failed(anyhow::Error),
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self::Usage(e.into())
    }

    pub fn failed(e: impl Into<anyhow::Error>) -> Self {
        Self::Failed(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
