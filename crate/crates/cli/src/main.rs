//! `camd`: dataset generation, training, evaluation, ablation and gradient
//! checks for the CAMD modulation recognizer.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error. `CAMD_THREADS` caps the worker pool; results do not
//! depend on it.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "camd",
    version,
    about = "MIMO modulation recognition with CAMD"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration with dotted keys (model.width, train.lr, ...).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a labeled dataset file.
    Gen(GenArgs),
    /// Train on a dataset; writes a checkpoint, logs and a test report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every frame of a dataset.
    Eval(EvalArgs),
    /// Train every architecture variant under one seed and compare.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Comma-separated classes: bpsk, qpsk, pskM, qamM, pamM, apsk16.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub nt: Option<usize>,
    #[arg(long)]
    pub nr: Option<usize>,
    /// Samples per frame.
    #[arg(long)]
    pub length: Option<usize>,
    /// `start:step:stop` in dB, or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
    /// Frames per (class, SNR) pair.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the transmitted symbols with each frame.
    #[arg(long)]
    pub clean: bool,
    /// Let the channel drift within a frame instead of block fading.
    #[arg(long)]
    pub drift: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// full, no_cc, transformer_only, lstm_only or cnn_only.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// SNR reported as the low-SNR operating point.
    #[arg(long, allow_hyphen_values = true)]
    pub low_snr: Option<f64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("camd: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck => commands::gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("camd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
