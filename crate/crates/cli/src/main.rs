use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Fertility classification pipeline for candled egg images.
#[derive(Debug, Parser)]
#[command(name = "candling", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output root for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Never read pretrained weights; pretrained backbones fall back to the reference CNN.
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest, validate segmentation, split train/test and assign folds.
    Prepare {
        /// Generate the synthetic dataset first and ingest it.
        #[arg(long)]
        synthetic: bool,
    },
    /// Render the synthetic candling dataset.
    Synth,
    /// Write a contact sheet of sampled augmentations of one sample.
    AugmentPreview {
        /// Number of augmented tiles.
        #[arg(long, default_value_t = 9)]
        n: usize,
    },
    /// Train on the whole training split and validate on the test split.
    Train,
    /// k-fold cross-validation on the training split.
    Crossval,
    /// Score a checkpoint on the test and training splits.
    Evaluate {
        /// Checkpoint to score; defaults to the final model, then the best fold.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Emit curves, the metrics table and cross-validation summaries.
    Report,
}

/// A failed command and the process exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Configuration or input error (exit 2).
    Input(String),
    /// A required upstream artifact is missing (exit 3).
    Missing(PathBuf, String),
    /// Training diverged (exit 4).
    Diverged(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Input(_) => 2,
            Failure::Missing(..) => 3,
            Failure::Diverged(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(m) | Failure::Diverged(m) => f.write_str(m),
            Failure::Missing(path, what) => write!(f, "missing {what}: {}", path.display()),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Input(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.offline {
        cfg.models.offline = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Prepare { synthetic } => commands::prepare(&cfg, *synthetic),
        Command::Synth => commands::synth(&cfg).map(drop),
        Command::AugmentPreview { n } => commands::augment_preview(&cfg, *n),
        Command::Train => commands::train(&cfg),
        Command::Crossval => commands::crossval(&cfg),
        Command::Evaluate { checkpoint } => commands::evaluate(&cfg, checkpoint.as_deref()),
        Command::Report => commands::report(&cfg),
    }
}

pub fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(path.to_path_buf(), what.to_string()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
