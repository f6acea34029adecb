use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "lsnet",
    version,
    about = "LS convolution networks: describe, train, evaluate, benchmark and analyse"
)]
pub struct Cli {
    /// Worker threads; LSNET_DETERMINISTIC=1 forces 1.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print a model spec with its parameter and MAC accounting.
    Describe(DescribeArgs),
    /// Train on a dataset, writing metrics, weights and a JSON summary.
    Train(TrainArgs),
    /// Evaluate a weight file on a dataset.
    Eval(EvalArgs),
    /// Time SKA against its naive form, or a model's forward pass.
    Bench(BenchArgs),
    /// Write the accumulated aggregation weights of one LS conv as PGM and CSV.
    DumpAggWeights(DumpArgs),
    /// Write the effective receptive field of one output position as PGM and CSV.
    ErfMap(ErfArgs),
    /// Generate the seeded blobs10 dataset on disk.
    GenData(GenDataArgs),
    /// Finite-difference check of every analytic gradient of a model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DType {
    F32,
    F64,
}

/// Model selection plus ablation switches.
#[derive(Args, Debug, Clone)]
pub struct SpecArgs {
    /// Built-in variant (t, s, b, micro, tiny) or a spec file.
    #[arg(long, default_value = "micro")]
    pub variant: String,
    /// Replace the local depthwise conv of every block by identity.
    #[arg(long)]
    pub no_dw: bool,
    /// Drop the SE layers.
    #[arg(long)]
    pub no_se: bool,
    /// Drop the large depthwise conv inside LKP.
    #[arg(long)]
    pub no_lkp_dw: bool,
    /// Large kernel size of LKP.
    #[arg(long)]
    pub kl: Option<usize>,
    /// Small kernel size of SKA.
    #[arg(long)]
    pub ks: Option<usize>,
    /// Channels per aggregation group.
    #[arg(long)]
    pub group_width: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Input resolution; defaults to 224 for t/s/b and 32 otherwise.
    #[arg(long)]
    pub res: Option<usize>,
    /// List every layer instead of totals per operator kind.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// `blobs10` or a dataset directory (IDX pair or class-per-directory PGM/PPM).
    #[arg(long, default_value = "blobs10")]
    pub data: String,
    /// Held-out set; defaults to `blobs10-test` when training on `blobs10`.
    #[arg(long)]
    pub test_data: Option<String>,
    /// Seed of the generated blobs10 splits.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Use SGD with momentum 0.9 instead of AdamW.
    #[arg(long)]
    pub sgd: bool,
    /// Random horizontal flips of training images.
    #[arg(long)]
    pub hflip: bool,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = DType::F32)]
    pub dtype: DType,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Model spec; defaults to the `spec.txt` next to the weight file.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value = "blobs10-test")]
    pub data: String,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, value_enum, default_value_t = DType::F32)]
    pub dtype: DType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Ska,
    Model,
    All,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchOp::Ska)]
    pub op: BenchOp,
    /// SKA input shape `N,C,H,W`.
    #[arg(long, default_value = "1,64,64,64")]
    pub shape: String,
    #[arg(long, default_value_t = 3)]
    pub ks: usize,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    #[arg(long, default_value_t = 9)]
    pub repeats: usize,
    /// Model for `--op model`.
    #[arg(long, default_value = "micro")]
    pub variant: String,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DType::F32)]
    pub dtype: DType,
    /// Also write `bench.csv` here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Where the analysed parameters come from.
#[derive(Args, Debug)]
pub struct StoreArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Trained weights; without it the model is freshly initialized from `--seed`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// PGM/PPM image, normalized by its own channel statistics.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Dataset to take the image from.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// 1-based stage.
    #[arg(long)]
    pub stage: Option<usize>,
    /// 0-based LS conv within the stage.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = DType::F32)]
    pub dtype: DType,
}

#[derive(Args, Debug)]
pub struct ErfArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// PGM/PPM image; without it the map averages `--probes` standard-normal images.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Probe image resolution.
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    /// 1-based stage whose output is probed.
    #[arg(long, default_value_t = 3)]
    pub stage: usize,
    /// Feature position `row,col`; defaults to the center.
    #[arg(long)]
    pub position: Option<String>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = DType::F64)]
    pub dtype: DType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataLayout {
    Idx,
    RawDir,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DataLayout::Idx)]
    pub format: DataLayout,
    /// Receives `train/` and `test/`.
    #[arg(long, default_value = "data/blobs10")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = lsnet::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `gradcheck.json` here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
