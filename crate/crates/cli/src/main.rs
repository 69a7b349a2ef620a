//! `irreg`: synthesize benchmark pairs, register them, evaluate, and inspect
//! correlation volumes.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "irreg", version, about = "Infrared/visible homography registration toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Never changes numerical output.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Estimator configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write procedural co-registered source pairs (ir/ and vis/).
    MakeScenes(MakeScenesArgs),
    /// Generate a misaligned benchmark set from source pairs.
    Synth(SynthArgs),
    /// Register every pair of a manifest, or a single pair.
    Register(RegisterArgs),
    /// Score registration outputs against the manifest ground truth.
    Eval(EvalArgs),
    /// Dump one correlation volume and its shift field.
    DebugCorr(DebugCorrArgs),
}

#[derive(Args, Debug)]
pub struct MakeScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 320)]
    pub height: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory holding ir/<name>.png and vis/<name>.png.
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 8.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The aligned visible crop (mono-modality).
    Aligned,
    /// The intensity-inverted aligned crop.
    Inverted,
    /// The infrared crop (cross-modality).
    Ir,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long, conflicts_with_all = ["src", "tgt"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "tgt")]
    pub src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    pub tgt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Which manifest image the distorted crop is registered onto.
    #[arg(long, value_enum, default_value_t = Target::Aligned)]
    pub target: Target,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of `register`; not needed with --identity.
    #[arg(long, required_unless_present = "identity")]
    pub results: Option<PathBuf>,
    /// Evaluate the identity estimate instead of registration results.
    #[arg(long)]
    pub identity: bool,
    /// Where results.csv goes (defaults to the results directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageArg {
    Horizontal,
    Vertical,
    Grid,
}

#[derive(Args, Debug)]
pub struct DebugCorrArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Pyramid level: 3 is 1/8 scale, 1 is 1/2.
    #[arg(long, default_value_t = 3)]
    pub level: usize,
    /// Round within the level, from 1.
    #[arg(long, default_value_t = 1)]
    pub round: usize,
    #[arg(long, value_enum, default_value_t = StageArg::Horizontal)]
    pub stage: StageArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Bad arguments exit with 2, failures with 1.
pub enum CliError {
    Usage(anyhow::Error),
    Failure(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failure(e)
    }
}

pub fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow::anyhow!("{msg}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Failure(e.into()))
        .and_then(|_| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
