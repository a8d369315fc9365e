//! Command-line driver: synthetic data, training, evaluation, ablation and
//! gradient verification, each producing reproducible output directories.

mod commands;
mod run_config;

use std::ffi::OsString;
use std::io::Write;

use clap::{Args, Parser, Subcommand};
use dtnet_core::{Error, Variant};

pub use commands::{ablate, eval, gradcheck, synth, train, AblationRow, ABLATION_FILE, CHECKPOINT_FILE, GRADCHECK_FILE, METRICS_FILE, PR_FILE, REPORT_FILE};
pub use run_config::{RunConfig, RUN_CONFIG_FILE};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "dtnet", version, about = "Dynamic translation-variant vehicle detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate all four ablation variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Model preset whose input resolution the images use.
    #[arg(long, default_value = "desk")]
    pub size: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value = "desk")]
    pub size: String,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Peak learning rate of the one-cycle schedule.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Held-out set evaluated during training.
    #[arg(long)]
    pub eval_data: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Probability of mirroring each training image; 0 disables flipping.
    #[arg(long, default_value_t = 0.5)]
    pub hflip: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    /// Score cutoff for the reported precision and recall.
    #[arg(long, default_value_t = 0.25)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms: f64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "tiny")]
    pub size: String,
    /// Entries checked per tensor.
    #[arg(long, default_value_t = 6)]
    pub coords: usize,
    /// Also check every parameter tensor of a whole tiny detector.
    #[arg(long)]
    pub full_model: bool,
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    /// Test hook: perturb the backward rule of one op kind.
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 4)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value = "desk")]
    pub size: String,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Held-out set for the table; the training set is used when absent.
    #[arg(long)]
    pub eval_data: Option<std::path::PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Checkpoint { .. } => EXIT_CHECKPOINT,
        Error::Internal(_) => EXIT_INTERNAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(&a, out).map(|_| EXIT_OK),
        Command::Train(a) => train(&a, out).map(|_| EXIT_OK),
        Command::Eval(a) => eval(&a, out).map(|_| EXIT_OK),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Ablate(a) => ablate(&a, out).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
