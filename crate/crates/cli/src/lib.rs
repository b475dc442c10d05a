//! The `ace` command line.
//!
//! [`run`] parses arguments, runs one subcommand and maps the outcome to a
//! process exit code; the binary is a thin wrapper around it so tests can
//! drive the whole surface in-process.

mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{data_dir, ENV_DATA_DIR};

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const BAD_INPUT: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ace_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(ace_core::Error::NonFinite(_)) => exit::NUMERIC,
            CliError::Core(_) => exit::BAD_INPUT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ace_core::Error> for CliError {
    fn from(e: ace_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "ace",
    version,
    about = "Train the auto-classifier-encoder and render images from stored drifts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Directory receiving every output of the command.
    #[arg(long, default_value = "ace-out")]
    pub out: PathBuf,
    /// CIFAR-10 binary directory; falls back to $ACE_DATA_DIR, then the config.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Set {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one run; runs after the first continue from a checkpoint toward a drift registry.
    Train {
        #[arg(long, default_value_t = 1)]
        run: u32,
        #[arg(long)]
        config: PathBuf,
        /// Registry of the previous run (required for run 2 and later).
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Checkpoint of the previous run (required for run 2 and later).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the eval-mode drift registry of a checkpoint's training set.
    ExtractDrifts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Raw / reconstruction / re-sample sheet plus a per-observation MSE table.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        set: Set,
        #[arg(long, default_value_t = 45)]
        first: usize,
        /// Seed of the re-sampling noise.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Grid of images around one observation's drift.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        center: usize,
        #[arg(long, default_value_t = 7.0)]
        span: f64,
        #[arg(long, default_value_t = 15)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Strip along the straight latent path between two observations.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Grid of images around the zero latent.
    Baseline {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Decoder class to render.
        #[arg(long, default_value_t = 0)]
        class: u8,
        #[arg(long, default_value_t = 7.0)]
        span: f64,
        #[arg(long, default_value_t = 15)]
        n: usize,
        #[arg(long, default_value = "ace-out")]
        out: PathBuf,
    },
    /// Write deterministic synthetic batches in the CIFAR-10 binary layout.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return exit::OK;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("ace: usage: {}", first.trim_start_matches("error: "));
            return exit::USAGE;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("ace: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
