//! `silo`: corpus generation, training, evaluation and plot data.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

mod cmd;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "silo", version, about = "Learned superoptimization of toy-ISA programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a train/dev/test corpus with test suites and live-out sets.
    Datagen(DatagenArgs),
    /// Supervised pre-training on (spec, reference) pairs.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained model with SILO or REINFORCE.
    Finetune(FinetuneArgs),
    /// Beam-search evaluation and the summary table.
    Eval(EvalArgs),
    /// CSV series for plotting from finished runs.
    Plotdata(PlotArgs),
    /// Serve the evaluation protocol on a Unix socket.
    Serve(ServeArgs),
    /// Score one rewrite of a corpus entry.
    Score(ScoreArgs),
}

#[derive(Args, Serialize, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 300)]
    pub test: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Test cases per suite.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Probability that the reference computes straight into the return register.
    #[arg(long, default_value_t = 0.03)]
    pub rax_prob: f64,
}

#[derive(Args, Serialize, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub factor: f64,
    #[arg(long, default_value_t = 2000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 500)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Model preset: desk, paper or tiny.
    #[arg(long, default_value = "desk")]
    pub model: String,
    /// Held-out entries scored per evaluation (0 = whole dev split).
    #[arg(long, default_value_t = 0)]
    pub heldout_limit: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AlgoName {
    Silo,
    Reinforce,
}

#[derive(Args, Serialize, Debug)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub algo: AlgoName,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pre-trained checkpoint, or a pre-training run directory (latest checkpoint).
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub dev_every: u64,
    /// Dev entries scored for model selection (0 disables dev scoring).
    #[arg(long, default_value_t = 100)]
    pub dev_size: usize,
    #[arg(long, default_value_t = 329)]
    pub dev_seed: u64,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Exploration batch (SILO) or policy-gradient batch (REINFORCE).
    #[arg(long, default_value_t = 16)]
    pub batch_ex: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_tr: usize,
    #[arg(long, default_value_t = 1)]
    pub samples_per_spec: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Learning-rate factor; defaults to 0.5 for SILO and 0.01 for REINFORCE.
    #[arg(long)]
    pub factor: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub warmup: u64,
    #[arg(long)]
    pub prioritize_replaced: bool,
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 50_000.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100.0)]
    pub bit_rate: f64,
    #[arg(long, default_value_t = 100_000.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 1)]
    pub actors: usize,
    /// Snapshot staleness bound; unbounded for SILO and 1 for REINFORCE by default.
    #[arg(long)]
    pub staleness: Option<u64>,
    /// Wait for every actor at every step.
    #[arg(long)]
    pub sync: bool,
    /// Evaluation worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Route evaluation through a Unix socket served at this path.
    #[arg(long)]
    pub socket: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub decode_slack: usize,
}

#[derive(Args, Serialize, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `LABEL=PATH`, repeatable. PATH is a checkpoint or a run directory
    /// (its selected checkpoint, else its latest).
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Score only the first N entries (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 16)]
    pub decode_slack: usize,
}

#[derive(Args, Serialize, Debug)]
pub struct PlotArgs {
    /// Run directories, optionally as `LABEL=DIR`.
    #[arg(required = true)]
    pub runs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub socket: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Serialize, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub entry: String,
    /// Assembly file with the rewrite.
    #[arg(long)]
    pub rewrite: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Datagen(a) => cmd::datagen(&a),
        Cmd::Pretrain(a) => cmd::pretrain(&a),
        Cmd::Finetune(a) => cmd::finetune(&a),
        Cmd::Eval(a) => cmd::eval(&a),
        Cmd::Plotdata(a) => cmd::plotdata(&a),
        Cmd::Serve(a) => cmd::serve(&a),
        Cmd::Score(a) => cmd::score(&a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
