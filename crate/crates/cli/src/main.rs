//! `llp`: datasets, bags, training, evaluation, sweeps and loss checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use llp_core::losses::{GradMode, LossKind};
use llp_core::model::Activation;

mod commands;
mod config;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "llp", version, about = "Learning from label proportions")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Gaussian-blob dataset as CSV.
    Gen(GenArgs),
    /// Group a dataset into fixed bags (JSON lines).
    Bags(BagsArgs),
    /// Train a classifier from bag proportions.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Sweep bag sizes and losses, one CSV row per run.
    Sweep(SweepArgs),
    /// Run the loss property suite and print a JSON report.
    Losscheck(LosscheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Within-class standard deviation.
    #[arg(long)]
    spread: Option<f64>,
    /// Half-width of the hypercube class centers are drawn from.
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON blob spec; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BagsArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    bag_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Optimizer and loss flags shared by `train` and `sweep`.
#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long, value_parser = parse_grad_mode)]
    grad_mode: Option<GradMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch from which the learning rate is divided by 10 (default: epochs / 2).
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long)]
    bags_per_batch: Option<usize>,
    /// Hidden layer widths, comma separated; empty for a linear model.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long)]
    hidden_bias: bool,
    /// Write 0 in place of wall-clock seconds so outputs are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Bags built by `llp bags`; otherwise bags are built from --bag-size.
    #[arg(long)]
    bags: Option<PathBuf>,
    #[arg(long)]
    bag_size: Option<usize>,
    /// Labeled CSV evaluated after every epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch history CSV (default: <out>.history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
    /// JSON run config; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `llp train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Dataset CSV; Gaussian blobs are generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    bag_sizes: Option<Vec<usize>>,
    /// Single bag size (same as --bag-sizes with one entry).
    #[arg(long, conflicts_with = "bag_sizes")]
    bag_size: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
    loss: Option<Vec<LossKind>>,
    /// Alpha grid for ROT runs.
    #[arg(long, value_delimiter = ',', conflicts_with = "alpha")]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    /// JSON experiment config; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LosscheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the suite against a solver with a sign-flipped damping exponent.
    #[arg(long, hide = true)]
    inject_tau_fault: bool,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: llp_core::LlpError| e.to_string())
}

fn parse_grad_mode(s: &str) -> Result<GradMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "unrolled" => Ok(GradMode::Unrolled),
        "envelope" => Ok(GradMode::Envelope),
        other => Err(format!(
            "unknown gradient mode `{other}` (unrolled | envelope)"
        )),
    }
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: llp_core::LlpError| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Bags(a) => commands::bags(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Losscheck(a) => commands::losscheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::LosscheckFailed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
