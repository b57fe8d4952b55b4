//! `fedleak`: generate data, produce client updates, attack them and evaluate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedleak::attack::{AttackMode, Distance, PriorKind};
use fedleak::defenses::DefenseConfig;
use fedleak::Error;

#[derive(Parser, Debug)]
#[command(name = "fedleak", version, about = "Data leakage from federated averaging updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic client dataset.
    GenData(GenDataArgs),
    /// Train one client from a fresh (or given) global model and write the update.
    ClientUpdate(ClientUpdateArgs),
    /// Reconstruct the client's inputs from an update.
    Attack(AttackArgs),
    /// Score reconstructions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run a grid of client updates and attacks described by a JSON file.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of classes.
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub per_class: usize,
    /// Image shape `CxHxW`.
    #[arg(long, default_value = "1x8x8")]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClientUpdateArgs {
    /// Dataset directory (inputs.flt and labels.txt).
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture name (`femnist`, `cifar100`, `mlp:1x8x8:64:4`) or a JSON file.
    #[arg(long)]
    pub arch_config: String,
    /// Global model to start from; freshly initialized from `--seed` if absent.
    #[arg(long)]
    pub server: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub eta: f64,
    #[arg(long)]
    pub batch_size: usize,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `none`, `gaussian:σ`, `laplacian:b`, `pruning:p`; `gaussian:0.1rms` scales by the update RMS.
    #[arg(long, default_value = "none")]
    pub defense: DefenseConfig,
    /// Reuse the first epoch's batches in every epoch.
    #[arg(long)]
    pub consistent_batches: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Directory written by `client-update`.
    #[arg(long)]
    pub update: PathBuf,
    #[arg(long, default_value = "ours_prior")]
    pub mode: AttackMode,
    /// `reconstruct`, `oracle:<labels file>` or `oracle-per-epoch` (needs `--data`).
    #[arg(long, default_value = "reconstruct")]
    pub labels: String,
    /// Client dataset, for `--labels oracle-per-epoch`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Hyperparameter profile: `femnist`, `cifar` or `desk`.
    #[arg(long, default_value = "femnist")]
    pub profile: String,
    /// JSON file of attack hyperparameters applied over the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Epoch aggregate: `mean`, `max`, `conv_mean`, `conv_max`.
    #[arg(long)]
    pub g: Option<PriorKind>,
    /// Distance between epoch aggregates: `l1` or `l2`.
    #[arg(long)]
    pub dinv: Option<Distance>,
    #[arg(long)]
    pub lambda_inv: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub lambda_clip: Option<f64>,
    /// Attack learning rate.
    #[arg(long)]
    pub eta_rec: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory written by `attack`.
    #[arg(long)]
    pub recon_dir: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub truth: PathBuf,
    /// PSNR success threshold; 20 for grayscale and 19 for color by default.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out_csv: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run cells in parallel.
    #[arg(long)]
    pub parallel: bool,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::ClientUpdate(a) => commands::client_update(&a),
        Command::Attack(a) => commands::attack(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Experiment(a) => commands::experiment(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
