//! `defusion`: corpus synthesis, frozen-encoder pretraining, training,
//! fusion, decomposition visuals, feature export and evaluation.

mod commands;
mod config;
mod corpus;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use defusion_core::Error;

#[derive(Debug, Parser)]
#[command(name = "defusion", version, about = "Self-supervised image fusion by feature decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural corpus in one of the expected layouts.
    Synth(SynthArgs),
    /// Pretrain one frozen encoder per modality corpus.
    PretrainFrozen(PretrainArgs),
    /// Train a model and write per-epoch checkpoints and a loss log.
    Train(TrainArgs),
    /// Fuse every source pair of a directory.
    Fuse(PairArgs),
    /// Write heatmap overlays and projector images of the decomposition.
    Decompose(PairArgs),
    /// Write the fused feature tokens of every pair.
    Export(PairArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Flat folder of scenes.
    Single,
    /// `vis/` and `ir/`.
    Ivf,
    /// `under/` and `over/`.
    Mef,
    /// `near/`, `far/` and `gt/`.
    Mff,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "single")]
    pub kind: SynthKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML file with `preset`, `[model]`, `[train]` and `[pretrain]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model size preset (`micro` or `tiny`).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// One folder per modality; the folder name becomes the modality name.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Zero keeps the random initialisation.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Folder of single-modal images.
    #[arg(long)]
    pub single: PathBuf,
    /// Folder holding filename-matched `vis/` and `ir/` subfolders.
    #[arg(long)]
    pub multi: Option<PathBuf>,
    #[arg(long)]
    pub frozen_vis: Option<PathBuf>,
    #[arg(long)]
    pub frozen_ir: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Continue from a training checkpoint with its stored configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Probability that a batch is multi-modal.
    #[arg(long)]
    pub mix: Option<f64>,
    /// `no-mfm`, `cud-only` or `no-shared-ca`; repeatable.
    #[arg(long)]
    pub ablate: Vec<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task-layout root holding the two source folders.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Selects the source folder names under `--input`.
    #[arg(long, default_value = "ivf")]
    pub task: String,
    /// Explicit first source folder (overrides `--input`).
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    /// Explicit second source folder.
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// `single` or `multi`; defaults to `multi` for ivf.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail on unpaired files instead of skipping them.
    #[arg(long)]
    pub strict: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: String,
    /// Task-layout root holding the source folders (and optional `gt/`).
    #[arg(long)]
    pub input: PathBuf,
    /// Fused images, named `<stem>.png` or `<stem>_fused.png`.
    #[arg(long)]
    pub fused: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// 2 usage/config, 3 data, 4 numeric abort, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Param(_) | Error::Checkpoint { .. } | Error::Io { .. } => 2,
                Error::Data(_) | Error::Decode { .. } | Error::Format { .. } | Error::Contract(_) => 3,
                Error::NonFinite { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::PretrainFrozen(a) => commands::pretrain_frozen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Decompose(a) => commands::decompose(&a),
        Command::Export(a) => commands::export(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
