mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use caid::nn::Method;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Context-aware instance discrimination: data generation, pretraining,
/// fine-tuning and feature analysis.
#[derive(Debug, Parser)]
#[command(name = "caid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic image dataset (PGM files plus manifest.csv).
    GenData(GenDataArgs),
    /// Self-supervised pretraining; writes checkpoints and metrics CSVs.
    Pretrain(PretrainArgs),
    /// Fine-tune from a checkpoint or from scratch; writes result CSVs.
    Finetune(FinetuneArgs),
    /// Feature-distance, CKA and significance reports.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment manifest (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Weight of the reconstruction loss; 0 gives the plain method.
    #[arg(long)]
    lambda_ca: Option<f64>,
    #[arg(long)]
    epochs_warmup: Option<usize>,
    #[arg(long)]
    epochs_joint: Option<usize>,
    /// Sets the data, init and augmentation seeds at once.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// `random`, or the path of a pretraining checkpoint.
    #[arg(long)]
    init: String,
    /// Fraction of labelled training images to use.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Arm name in the result CSV; defaults to `random` or the checkpoint's file stem.
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Distances,
    Cka,
    Ttest,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Two comma-separated inputs: checkpoints (distances: CAiD then
    /// baseline; cka: before then after fine-tuning) or result CSVs (ttest).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Probe images for distances and cka.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Curve labels for the distances mode.
    #[arg(long, value_delimiter = ',', default_value = "caid,baseline")]
    labels: Vec<String>,
    /// Encoder tap (1-5) whose pooled features are compared.
    #[arg(long, default_value_t = 5)]
    layer: usize,
    /// Use only the first N probe images.
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    caid::par::init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
