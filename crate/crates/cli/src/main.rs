//! `ctlrp`: generate synthetic propagation data, train the BiGCN classifier,
//! explain its predictions and evaluate explanation fidelity.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ctlrp",
    version,
    about = "Token-level explanations for GNN rumour classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-event explanation and evaluation.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic planted-token dataset, its vocabulary and registry.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus per-epoch log.
    Train(TrainArgs),
    /// Explain predictions for some or all events of a dataset.
    Explain(ExplainArgs),
    /// Sweep fidelity over sparsity levels for several methods.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub planted_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSONL dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file; fixes the embedding table size.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// mean, max or mlp.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// ct-lrp, token-lrp, node-lrp, grad-cam or c-eb.
    #[arg(long)]
    pub method: Option<String>,
    /// Event id to explain; repeat for several. Default: every event.
    #[arg(long = "event")]
    pub events: Vec<String>,
    /// Class to explain instead of the prediction (not for ct-lrp).
    #[arg(long)]
    pub class: Option<usize>,
    /// Also write one HTML page per event.
    #[arg(long)]
    pub html: bool,
    /// Vocabulary file, used to show token text.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// conserving or unnormalized.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint, one per split; repeat for several. Without any,
    /// k-fold models are trained on `--data`.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated sparsity levels in [0, 1).
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Epochs per fold model when training k-fold.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Name recorded in the report; defaults to the dataset file stem.
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Explain(a) => commands::explain(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
