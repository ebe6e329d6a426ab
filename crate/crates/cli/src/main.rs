//! `texadiff` command-line front end.
//!
//! Exit codes: 0 ok, 2 I/O or usage, 3 dimension/contract, 4 config, 5 numeric.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use texadiff::diffusion::FreezePreset;
use texadiff::Error;

#[derive(Parser, Debug)]
#[command(name = "texadiff", version, about = "Texture-aware diffusion super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the texture density map of an LR/HR pair and its latent mask.
    RtdmEstimate(commands::RtdmArgs),
    /// Generate a synthetic dataset.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        freeze_preset: Option<PresetArg>,
    },
    /// Train the texture map predictor on a dataset directory.
    TrainPredictor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a super-resolved image with a chosen mask source.
    Sample(commands::SampleArgs),
    /// Compare images (and optionally masks); prints one JSON line.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, requires = "mask_ref")]
        mask_pred: Option<PathBuf>,
        #[arg(long, requires = "mask_pred")]
        mask_ref: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    None,
    Paper,
}

impl From<PresetArg> for FreezePreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::None => FreezePreset::None,
            PresetArg::Paper => FreezePreset::Paper,
        }
    }
}

/// Failures of the front end itself, on top of library errors.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e {
                Error::Io { .. } | Error::Format { .. } => 2,
                Error::Shape(_) | Error::InvalidArgument(_) => 3,
                Error::Config(_) => 4,
                Error::Numeric(_) => 5,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

/// `TEXADIFF_THREADS`: 0 or unset means auto. Every command currently runs on
/// one thread, so the value is only validated.
fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("TEXADIFF_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("TEXADIFF_THREADS must be a non-negative integer, got {v:?}")).into()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    thread_cap()?;
    match cli.cmd {
        Command::RtdmEstimate(a) => commands::rtdm_estimate(&a),
        Command::Dataset { config, out } => commands::dataset(&config, &out),
        Command::Train { config, dataset, out, freeze_preset } => {
            commands::train(&config, &dataset, &out, freeze_preset.map(Into::into))
        }
        Command::TrainPredictor { config, dataset, out } => commands::train_predictor(&config, &dataset, &out),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval { pred, reference, mask_pred, mask_ref } => {
            commands::eval(&pred, &reference, mask_pred.as_deref().zip(mask_ref.as_deref()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("texadiff: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
