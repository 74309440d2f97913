use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "quartz", version, about = "Convert ANNs to time-to-first-spike SNNs, simulate them and report costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on MNIST with plain SGD.
    Train(TrainArgs),
    /// Rescale a model's layers from calibration activations.
    Normalize(NormalizeArgs),
    /// Convert a model into a spiking network file.
    Convert(ConvertArgs),
    /// Simulate a spiking network on one input or a dataset.
    Run(RunArgs),
    /// Predict spike times analytically, without simulation.
    Oracle(OracleArgs),
    /// Compare simulation against the oracle.
    Diff(OracleArgs),
    /// Error, operations and energy for several T_max values (CSV).
    SweepTmax(SweepTmaxArgs),
    /// Accuracy and early spikes over normalization percentiles (CSV).
    SweepPercentile(SweepPercentileArgs),
    /// Core placement, power and latency estimate.
    Hwcost(HwcostArgs),
    /// Write the two-input, two-output example model.
    Toy(ToyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    /// Comma-separated values of a single input sample.
    #[arg(long, conflicts_with_all = ["data", "limit"])]
    input: Option<String>,
    /// Directory holding the MNIST IDX files (default: data/mnist or $QUARTZ_MNIST_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Dense widths such as 784-128-10, or `lenet`.
    #[arg(long, default_value = "784-128-10")]
    arch: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on the first N training images only.
    #[arg(long)]
    limit: Option<usize>,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct NormalizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 98.5)]
    percentile: f64,
    /// Calibration samples drawn from the training split.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pre-scale each layer's bias by the earlier scales before measuring it.
    #[arg(long, conflicts_with = "legacy")]
    strict: bool,
    /// Data-based weight normalization instead.
    #[arg(long)]
    legacy: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Scatter pairs as CSV (layer, original, normalized_rescaled).
    #[arg(long)]
    pairs_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ConversionArgs {
    #[arg(long, default_value_t = 16)]
    tmax: u32,
    /// Rectify the output layer (the default).
    #[arg(long, overrides_with = "no_rectify_last")]
    rectify_last: bool,
    /// Let the output layer spike after 2 T_max and decode negative values.
    #[arg(long, overrides_with = "rectify_last")]
    no_rectify_last: bool,
    /// Evaluate the first layer in floating point and encode its output.
    #[arg(long)]
    first_layer_float: bool,
    /// Extra steps of the output window when it is not rectified.
    #[arg(long)]
    ext: Option<u32>,
}

#[derive(Debug, Args, Serialize)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    conversion: ConversionArgs,
    /// Steps of transmission delay per hop.
    #[arg(long, default_value_t = 0)]
    delay: u32,
}

#[derive(Debug, Args, Serialize)]
struct RunArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    inputs: DataArgs,
    /// Per-step current and membrane trace CSV (single input only).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct OracleArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    inputs: DataArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SweepTmaxArgs {
    /// Normalized model directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    tmax_list: Vec<u32>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// CSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SweepPercentileArgs {
    /// Model directory before normalization.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "90,92,94,96,98,98.5,100")]
    percentiles: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    tmax: u32,
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct HwcostArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long, default_value_t = 0)]
    delay: u32,
    #[arg(long, default_value_t = 1024)]
    neurons_per_core: usize,
    #[arg(long, default_value_t = 65_536)]
    synapses_per_core: usize,
    /// JSON file with power parameters (defaults are calibrated values).
    #[arg(long)]
    power_params: Option<PathBuf>,
    /// Quantize weights to 8 bits first.
    #[arg(long)]
    quantize: bool,
    #[command(flatten)]
    inputs: DataArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
