//! `nrsfm` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nrsfm::evaluation::DepthCentering;
use nrsfm::losses::Variant;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "nrsfm", version, about = "Learned non-rigid structure from motion on 2D keypoints")]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "NRSFM_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads for parallel work (restarts, sweep cells).
    #[arg(long, global = true, env = "NRSFM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic keypoint dataset with ground truth.
    Generate(GenerateArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score one or more checkpoints on a dataset.
    Eval(EvalArgs),
    /// Reconstruct a single view and optionally export point clouds.
    Reconstruct(ReconstructArgs),
    /// Train and evaluate over a noise × occlusion grid.
    Sweep(SweepArgs),
    /// Rigid factorization of fully visible views of one shape.
    OracleRigid(OracleRigidArgs),
    /// Per-view pose and coefficient fit against a known basis.
    OracleFit(OracleFitArgs),
    /// Count equations and unknowns of a factorization problem.
    Feasibility(FeasibilityArgs),
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    keypoints: usize,
    /// Dimension of the ground-truth shape basis.
    #[arg(long = "basis-dim", default_value_t = 6)]
    basis_dim: usize,
    #[arg(long, default_value_t = 100)]
    shapes: usize,
    #[arg(long = "views-per-shape", default_value_t = 30)]
    views_per_shape: usize,
    #[arg(long = "alpha-std", default_value_t = 1.0)]
    alpha_std: f64,
    /// Standard deviation of additive image noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Independent per-keypoint occlusion probability.
    #[arg(long = "p-occ", default_value_t = 0.0)]
    p_occ: f64,
    #[arg(long = "train-fraction", default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    synth: SynthArgs,
    /// Generate a single rigid shape (forces a one-dimensional basis).
    #[arg(long, conflicts_with = "class_sizes")]
    rigid: bool,
    /// Comma-separated keypoint counts of several classes padded into one
    /// layout.
    #[arg(long = "class-sizes", value_delimiter = ',')]
    class_sizes: Option<Vec<usize>>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Epochs without improvement before the rate decays.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long = "lr-decay", default_value_t = 10.0)]
    lr_decay: f64,
    #[arg(long = "min-lr", default_value_t = 1e-6)]
    min_lr: f64,
    /// Dimension of the learned shape basis.
    #[arg(long = "model-basis-dim", default_value_t = 10)]
    model_basis_dim: usize,
    #[arg(long, default_value_t = 1024)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    bottleneck: usize,
    #[arg(long, default_value_t = 6)]
    blocks: usize,
    #[arg(long = "no-batch-norm")]
    no_batch_norm: bool,
    /// Pseudo-Huber smoothing.
    #[arg(long, default_value_t = nrsfm::losses::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long = "w-reprojection", default_value_t = 1.0)]
    w_reprojection: f64,
    #[arg(long = "w-canonicalization", default_value_t = 1.0)]
    w_canonicalization: f64,
    #[arg(long = "w-equivariance", default_value_t = 1.0)]
    w_equivariance: f64,
    /// Stop gradients of the canonicalization loss at the reconstruction it
    /// rotates.
    #[arg(long = "detach-canonicalizer-input")]
    detach_canonicalizer_input: bool,
    #[arg(long = "train-seed", default_value_t = 0)]
    train_seed: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum VariantArg {
    Base,
    Equiv,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Equiv => Variant::Equiv,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long)]
    dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(short, long)]
    output: PathBuf,
    /// Continue from this checkpoint; its config is reused and only
    /// `--epochs` is taken from the command line.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON training report (defaults to `<output>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON-lines log of per-step and per-epoch losses.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CenteringArg {
    MeanDepth,
    RootJoint,
}

impl From<CenteringArg> for DepthCentering {
    fn from(c: CenteringArg) -> Self {
        match c {
            CenteringArg::MeanDepth => DepthCentering::MeanDepth,
            CenteringArg::RootJoint => DepthCentering::RootJoint,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ProtocolArgs {
    #[arg(long, value_enum, default_value_t = CenteringArg::MeanDepth)]
    centering: CenteringArg,
    /// Score predictions as given instead of the better of the prediction
    /// and its depth mirror.
    #[arg(long = "no-depth-flip")]
    no_depth_flip: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// One or more checkpoints; several give a comparison table.
    #[arg(short, long, num_args = 1.., required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(short, long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// JSON metrics report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Single-view JSON file.
    #[arg(long, conflicts_with_all = ["dataset", "index"])]
    view: Option<PathBuf>,
    #[arg(long, requires = "index")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    index: Option<usize>,
    #[arg(long = "ply-canonical")]
    ply_canonical: Option<PathBuf>,
    #[arg(long = "ply-camera")]
    ply_camera: Option<PathBuf>,
    /// JSON with pose, both point clouds and the reprojection error.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.02")]
    sigmas: Vec<f64>,
    #[arg(long = "p-occs", value_delimiter = ',', default_value = "0,0.2,0.5")]
    p_occs: Vec<f64>,
    /// Keypoint counts to sweep; defaults to `--keypoints`.
    #[arg(long = "keypoint-counts", value_delimiter = ',')]
    keypoint_counts: Option<Vec<usize>>,
    /// JSON result matrix.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleRigidArgs {
    #[arg(short, long)]
    dataset: PathBuf,
    /// Shape whose fully visible views are factorized.
    #[arg(long, default_value_t = 0)]
    shape: usize,
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum BasisSource {
    /// The dataset's ground-truth basis.
    Gt,
    /// The basis learned by `--checkpoint`.
    Checkpoint,
}

#[derive(Args, Debug)]
struct OracleFitArgs {
    #[arg(short, long)]
    dataset: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long, value_enum, default_value_t = BasisSource::Gt)]
    basis: BasisSource,
    #[arg(long, required_if_eq("basis", "checkpoint"))]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long = "max-iterations", default_value_t = 200)]
    max_iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FeasibilityArgs {
    #[arg(long)]
    views: usize,
    #[arg(long)]
    keypoints: usize,
    /// Omit for a rigid object.
    #[arg(long = "basis-dim")]
    basis_dim: Option<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

/// Process exit codes.
mod exit {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGED: u8 = 4;
}

fn exit_code(e: &nrsfm::Error) -> u8 {
    use nrsfm::Error::*;
    match e {
        InvalidConfig(_) => exit::USAGE,
        Diverged { .. } | NonFinite(_) | AllRestartsDiverged(_) => exit::DIVERGED,
        _ => exit::DATA,
    }
}

/// Resolves output paths against the configured output directory.
struct Paths(Option<PathBuf>);

impl Paths {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.0 {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(exit::USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::USAGE);
        }
    }
    let paths = Paths(cli.out_dir.clone());
    if let Some(dir) = &cli.out_dir {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("error: cannot create output directory {}: {e}", dir.display());
            return ExitCode::from(exit::DATA);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a, &paths),
        Command::Train(a) => commands::train(a, &paths),
        Command::Eval(a) => commands::eval(a, &paths),
        Command::Reconstruct(a) => commands::reconstruct(a, &paths),
        Command::Sweep(a) => commands::sweep(a, &paths),
        Command::OracleRigid(a) => commands::oracle_rigid(a, &paths),
        Command::OracleFit(a) => commands::oracle_fit(a),
        Command::Feasibility(a) => commands::feasibility(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
