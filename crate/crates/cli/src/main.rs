//! `cmt`: dataset generation, training, evaluation, robustness sweeps,
//! ablations and attention dumps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use cmt_core::config::{Config, KEYS};
use cmt_core::CmtError;

#[derive(Parser, Debug)]
#[command(
    name = "cmt",
    version,
    about = "Multi-modal 3D detection with coordinate-encoded tokens"
)]
pub struct Cli {
    /// Configuration file (`key = value` lines) applied over the desk preset.
    #[arg(long, global = true, env = "CMT_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate training and validation scenes plus an index file.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints and a per-step loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Evaluate a checkpoint under every sensor-failure mode.
    Robustness(RobustnessArgs),
    /// Train and evaluate the query-embedding and denoising ablations.
    Ablate(AblateArgs),
    /// Export cross-attention maps of selected queries.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training scenes (overrides `n_train`).
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Validation scenes (overrides `n_val`).
    #[arg(long)]
    pub val: Option<usize>,
    /// Scene generation seed (overrides `data_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Camera-only and LiDAR-only step probabilities.
    #[arg(long, num_args = 2, value_names = ["ETA_CAMERA", "ETA_LIDAR"])]
    pub mask_modal: Option<Vec<f64>>,
    /// Point-based query denoising.
    #[arg(long, value_enum)]
    pub denoise: Option<Switch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Both,
    Camera,
    Lidar,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub modality: Modality,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Validation scene index.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Comma-separated query ids; default: the three highest-scoring.
    #[arg(long, value_delimiter = ',')]
    pub queries: Vec<usize>,
}

fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (--set KEY=VALUE or a --config file):\n");
    for (k, help) in KEYS {
        s.push_str(&format!("  {k:width$}  {help}\n"));
    }
    s.push_str("\nDefaults are the desk preset; CMT_CONFIG names a default config file.");
    s
}

/// Exit status per error category; usage errors exit with 2 from clap.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CmtError>() {
        Some(CmtError::Config(_)) => 3,
        Some(CmtError::Io(_)) => 4,
        Some(CmtError::Corrupt(_) | CmtError::Incompatible(_)) => 5,
        Some(CmtError::NonFiniteLoss { .. }) => 6,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 4,
        None => 1,
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut config = Config::desk();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(CmtError::Io(e)).context(format!("reading {}", path.display())))?;
        config.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CmtError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CmtError::Config(format!("thread pool: {e}")))?;
    }
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(config, &a),
        Command::Train(a) => commands::train(config, &a),
        Command::Eval(a) => commands::eval(&a),
        Command::Robustness(a) => commands::robustness(&a),
        Command::Ablate(a) => commands::ablate(config, &a),
        Command::DumpAttention(a) => commands::dump_attention(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_long_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
