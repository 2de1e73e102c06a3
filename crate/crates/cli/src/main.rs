//! `pearl`: dataset generation, staged training, evaluation, comparison and figures.

mod commands;
mod config;
mod figure;
mod palette;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pearl", version, about = "Predictive feature learning for video scene parsing")]
pub struct Cli {
    /// JSON or TOML file with the subcommand's configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Override one config field by dotted path; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = config::parse_key_value)]
    pub set: Vec<(String, String)>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic labeled video corpus.
    GenerateData(GenerateArgs),
    /// Train one pipeline stage.
    Train(TrainArgs),
    /// Score a parsing checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score several checkpoints and tabulate them.
    Compare(CompareArgs),
    /// Write a PNG figure for one clip.
    Visualize(VisualizeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData(_) => "generate-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::Visualize(_) => "visualize",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub num_clips: Option<usize>,
    #[arg(long)]
    pub val_clips: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub frames_per_clip: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// fp, pp, psp, ipnet-baseline, frozen-variant or flow-augmented.
    #[arg(long)]
    pub stage: Option<String>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Predecessor-stage checkpoint, or a same-stage checkpoint to resume.
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub ipnet_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub random_init: bool,
    #[arg(long)]
    pub pipeline_override: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score the dataset's own labels instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// train, val or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Flow for temporal consistency: synthetic-truth, block-matching, external or none.
    #[arg(long)]
    pub flow: Option<String>,
    #[arg(long)]
    pub flow_dir: Option<PathBuf>,
    /// Wrap the parser in the warp-and-merge flow baseline with this merge weight.
    #[arg(long, value_name = "ALPHA")]
    pub warp_merge: Option<f64>,
    /// Write predicted label maps as PNGs under `<out>/predictions`.
    #[arg(long)]
    pub dump_predictions: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Checkpoints, one table row each, in the given order.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub flow: Option<String>,
    #[arg(long)]
    pub flow_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub clip: Option<String>,
    /// 1-based frame index; defaults to the clip's last frame.
    #[arg(long)]
    pub frame: Option<usize>,
    /// JSON palette mapping class index to RGB.
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("PEARL_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
