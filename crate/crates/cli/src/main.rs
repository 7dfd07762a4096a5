mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use align3d::{AlignMetric, AlignTarget};

/// Relative output paths are resolved under this directory when it is set.
pub const OUT_ROOT_ENV: &str = "ALIGN3D_OUT_ROOT";

#[derive(Parser)]
#[command(name = "align3d", version, about = "Point-cloud to language toy stack with feature alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset.
    GenData(GenDataArgs),
    /// Run Stage 1 (pretraining) or Stage 2 (aligned fine-tuning).
    Train(TrainArgs),
    /// Probe a checkpoint: per-layer KNN, classification, captions.
    Probe(ProbeArgs),
    /// Run an ablation grid or a training-fraction sweep.
    Ablate(AblateArgs),
    /// Merge run directories into one results table with plots.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Comma-separated shape names (default: all ten).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    Cosine,
    L1,
    L2,
}

impl From<LossArg> for AlignMetric {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Cosine => AlignMetric::Cosine,
            LossArg::L1 => AlignMetric::L1,
            LossArg::L2 => AlignMetric::L2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Qformer,
    #[value(name = "projector_mid")]
    ProjectorMid,
    #[value(name = "projector_final")]
    ProjectorFinal,
}

impl From<TargetArg> for AlignTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Qformer => AlignTarget::Qformer,
            TargetArg::ProjectorMid => AlignTarget::ProjectorMid,
            TargetArg::ProjectorFinal => AlignTarget::ProjectorFinal,
        }
    }
}

/// Options shared by commands that build or load a dataset and config.
#[derive(Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data (default: generate from config).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Stage-1 checkpoint directory (stage 2 only).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub layer: Option<usize>,
    /// Joint alignment layers, e.g. 3,4,5.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    #[arg(long)]
    pub proj_depth: Option<usize>,
    /// Disable the alignment branch entirely.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeMode {
    Knn,
    Classify,
    Caption,
    All,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Layers to probe (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// K values (default: 1,10).
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value = "all")]
    pub mode: ProbeMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// TOML grid file.
    #[arg(long)]
    pub grid: PathBuf,
    /// Shared Stage-1 checkpoint (default: train one from the config).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Seeds (overrides the grid file; default 0).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Stage-2 steps per cell.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip writing a checkpoint per run.
    #[arg(long)]
    pub no_checkpoints: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Probe(a) => commands::probe(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Report(a) => report::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
