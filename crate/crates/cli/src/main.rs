mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use burnmap::Error;
use clap::{Args, Parser, Subcommand};

/// Burned-area segmentation from bi-temporal imagery.
#[derive(Debug, Parser)]
#[command(name = "burnmap", version)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset of BARC1 scenes.
    Synthgen(SynthArgs),
    /// QA-filter the scenes of a directory and write a split manifest.
    Split(SplitArgs),
    /// Train a model and write checkpoints plus a JSONL history.
    Train(TrainArgs),
    /// IoU/F1 report per split, from a checkpoint or from stored predictions.
    Eval(EvalArgs),
    /// Full-scene inference: predicted mask and error map.
    Infer(InferArgs),
    /// Parameter counts of the configured network.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// data.dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// data.count
    #[arg(long)]
    pub count: Option<usize>,
    /// data.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// data.height and data.width
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// data.dir
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// data.split_file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// data.split.mode: temporal, biome or combined
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// data.dir
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// data.split_file
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// train.out_dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train.strategy: full_ft, decoder_only or lora
    #[arg(long)]
    pub strategy: Option<String>,
    /// train.max_steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// infer.checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Read `<fire_id>.pred.pgm` masks from here instead of running a model.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// data.dir
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// data.split_file
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// infer.stride
    #[arg(long)]
    pub stride: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// infer.force
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// BARC1 scene to segment.
    #[arg(long)]
    pub scene: PathBuf,
    /// infer.checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// infer.out_dir
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// infer.stride
    #[arg(long)]
    pub stride: Option<usize>,
    /// infer.force
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// model.preset
    #[arg(long)]
    pub preset: Option<String>,
    /// train.strategy
    #[arg(long)]
    pub strategy: Option<String>,
    /// lora.rank
    #[arg(long)]
    pub rank: Option<usize>,
    /// Print the three reference encoder rows instead of the configured one.
    #[arg(long)]
    pub reference: bool,
    /// Emit JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Process exit status for each failure class.
pub fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Io { .. } => (3, "io"),
        Error::Config(_) => (4, "config"),
        Error::Data(_) => (5, "data"),
        Error::Format { .. } => (6, "format"),
        Error::Training(_) => (7, "training"),
        Error::Tensor(_) | Error::Invariant(_) => (8, "internal"),
    }
}

fn report(code: u8, kind: &str, msg: &str) -> ExitCode {
    eprintln!(
        "error: kind={kind} code={code} message={}",
        serde_json::to_string(msg).expect("string serialises")
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("usage error");
            return report(2, "usage", first.trim_start_matches("error: "));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            report(code, kind, &e.to_string())
        }
    }
}
