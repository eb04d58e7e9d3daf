//! `uidet`: dataset generation, two-phase training, evaluation, text
//! ablations, cost benchmarking and detection rendering.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uidet_core::Error;

#[derive(Parser, Debug)]
#[command(name = "uidet", version, about = "Multimodal UI-control detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic screenshot dataset.
    Gen(GenArgs),
    /// Train a baseline, or fine-tune a fusion model from one.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Evaluate a fusion checkpoint with corrupted descriptions.
    Ablate(AblateArgs),
    /// Report parameter counts and training/inference times.
    Bench(BenchArgs),
    /// Draw a checkpoint's detections onto one dataset image.
    Render(RenderArgs),
    /// Run baseline, the three fusion variants, ablations and benchmarks.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class catalog: twin12 or full23.
    #[arg(long, default_value = "twin12")]
    pub catalog: String,
    #[arg(long, default_value_t = 256)]
    pub canvas: u32,
    /// Test images (default: 30% of count).
    #[arg(long)]
    pub test: Option<usize>,
    /// Validation images (default: 10% of the non-test pool).
    #[arg(long)]
    pub val: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    None,
    Add,
    Wsum,
    Conv,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (default: `data_dir` from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run config in TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
    pub xattn: Option<u8>,
    /// Baseline checkpoint; required when fusion is not `none`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint to write; the loss CSV and config echo go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SourceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory (default: the one recorded in the checkpoint).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub src: SourceArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationMode {
    Mismatch,
    Partial,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub src: SourceArgs,
    #[arg(long, value_enum)]
    pub mode: AblationMode,
    /// Class whose descriptions are removed (partial mode).
    #[arg(long)]
    pub class: Option<String>,
    /// Seed of the mismatched descriptions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report of the same checkpoint with correct descriptions.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub src: SourceArgs,
    /// Training epochs to time.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub src: SourceArgs,
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub conf: f64,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cross-attention modules of the fusion variants.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(3..=5))]
    pub xattn: u8,
    /// Fine-tuning epochs (default: the config's epochs).
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub bench_epochs: usize,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
}

/// 2 usage, 3 data or format, 4 numerical abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 2,
        Some(Error::Numerical { .. }) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Render(a) => commands::render(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
