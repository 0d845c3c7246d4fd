use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "binnet", version, about = "Binary neural networks on bit-packed weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train LeNet on MNIST and save the best model.
    Train(TrainArgs),
    /// Classify one digit with a saved model.
    Predict(PredictArgs),
    /// Pack the binary-layer weights of a trained model to 1 bit each.
    Convert(ConvertArgs),
    /// Time the GEMM kernels.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Bit width of the quantized blocks: 1 binary, 2..=31 quantized, 32 full precision.
    #[arg(long, default_value_t = 1)]
    pub bits: u32,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Train on the first N training images only.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    pub test_subset: Option<usize>,
    /// Model output path.
    #[arg(long, default_value = "lenet.bmx")]
    pub out: PathBuf,
    /// Per-epoch `epoch,train_loss,test_acc` CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl TrainArgs {
    pub fn new(data_dir: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        TrainArgs {
            data_dir: data_dir.into(),
            bits: 1,
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 100,
            seed: 7,
            subset: None,
            test_subset: None,
            out: out.into(),
            metrics: None,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Index into the MNIST test images.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub index: Option<usize>,
    /// Raw 28×28 grayscale file (784 bytes, row-major).
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// Trained float model.
    #[arg(long)]
    pub input: PathBuf,
    /// Packed model output.
    #[arg(long)]
    pub output: PathBuf,
    /// Skip the float/packed equivalence check.
    #[arg(long)]
    pub no_verify: bool,
    /// Random inputs for the equivalence check.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// One GEMM shape.
    Gemm(GemmBenchArgs),
    /// GEMM shapes of a convolution layer, swept along one axis.
    Conv(ConvBenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BenchCommon {
    /// Comma-separated kernel names, or `all`.
    #[arg(long, default_value = "all")]
    pub kernels: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GemmBenchArgs {
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 12800)]
    pub n: usize,
    #[arg(long, default_value_t = 1600)]
    pub k: usize,
    #[command(flatten)]
    pub common: BenchCommon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    InputChannels,
    Filters,
    KernelSize,
}

#[derive(Debug, Clone, Args)]
pub struct ConvBenchArgs {
    #[arg(long, value_enum, default_value = "input-channels")]
    pub axis: SweepAxis,
    /// Comma-separated axis values; per-axis defaults when absent.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub filters: usize,
    /// Square kernel side.
    #[arg(long, default_value_t = 5)]
    pub kernel: usize,
    #[arg(long, default_value_t = 200)]
    pub batch: usize,
    /// Output positions per image.
    #[arg(long, default_value_t = 64)]
    pub positions: usize,
    #[command(flatten)]
    pub common: BenchCommon,
}
