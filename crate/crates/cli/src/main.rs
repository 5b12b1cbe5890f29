//! `promptbook`: data generation, language-model pretraining, training,
//! generation, evaluation and ablation grids from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime or data errors.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptbook_core::data::Split;
use promptbook_core::pipeline::Suite;
use promptbook_core::prompt::CustomizationMode;

mod commands;
mod config;
mod run;

/// A usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "promptbook", version, about = "Image-conditioned prompt customization for a frozen language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene/report dataset.
    GenData(GenDataArgs),
    /// Pretrain the language model on report text and freeze it.
    PretrainLm(PretrainArgs),
    /// Train encoder, projection, promptbook and parameter network.
    Train(TrainArgs),
    /// Greedy report generation for one image or a whole split.
    Generate(GenerateArgs),
    /// Corpus metrics on a split, as JSON on stdout.
    Evaluate(EvaluateArgs),
    /// Run an ablation suite and write a CSV.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory or manifest file.
    #[arg(long = "data", visible_alias = "data-dir", env = "PROMPTBOOK_DATA_DIR")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON config with optional "model", "train", "pretrain" and "data" sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Copy)]
struct AblationArgs {
    /// Hold γ at 1.
    #[arg(long)]
    drop_gamma: bool,
    /// Hold β at 0.
    #[arg(long)]
    drop_beta: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    config: ConfigArg,
    /// Root under which the run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    lm_checkpoint: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    mode: Option<CustomizationMode>,
    #[arg(long)]
    num_prompts: Option<usize>,
    #[arg(long)]
    param_net_depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Drop factors during training as well.
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A raw image file; prints one line of text.
    #[arg(long, conflicts_with_all = ["data", "split"])]
    image: Option<PathBuf>,
    /// Dataset to generate for; prints JSON Lines.
    #[arg(long = "data", visible_alias = "data-dir", env = "PROMPTBOOK_DATA_DIR")]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Tokens after BOS, including EOS.
    #[arg(long, default_value_t = 37)]
    max_len: usize,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 37)]
    max_len: usize,
    /// Also write per-pair hypotheses and references to this CSV.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    suite: Suite,
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    lm_checkpoint: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<Usage>() || matches!(e.downcast_ref::<promptbook_core::Error>(), Some(promptbook_core::Error::Config(_)))
    });
    if usage {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::PretrainLm(a) => commands::pretrain_lm(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
