//! Command-line surface for RRQR-initialized dual LoRA adapters: matrix and
//! checkpoint formats, and the `import`, `factorize`, `init`, `analyze`,
//! `train-toy` and `merge` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod files;
pub mod rlmx;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rrqr_lora::adapter::{DEFAULT_MAIN_RANK, DEFAULT_SUB_RANK};
use rrqr_lora::InitStrategy;

pub use error::{CliError, CliResult, EXIT_DATA, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "rrqr-lora", version, about = "RRQR-initialized dual LoRA adapters")]
pub struct Cli {
    /// Seed for every random choice (adapter init, probes). Overrides the
    /// config seed for train-toy. Defaults to 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-layer work; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Re-check the command's numerical guarantee and fail with exit code 3
    /// if it does not hold.
    #[arg(long, global = true)]
    pub verify: bool,

    /// Read matrix inputs as CSV and write a CSV copy next to every matrix
    /// written.
    #[arg(long, global = true)]
    pub csv: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a checkpoint of `original` matrices from NAME=PATH pairs.
    Import {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true, value_name = "NAME=PATH")]
        layers: Vec<String>,
    },
    /// Pivoted QR of one matrix: writes q.rlmx, r.rlmx and perm.json.
    Factorize { input: PathBuf, out: PathBuf },
    /// Add residual and adapter matrices for every original layer.
    Init {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAIN_RANK)]
        r_main: usize,
        #[arg(long, default_value_t = DEFAULT_SUB_RANK)]
        r_sub: usize,
        #[arg(long, default_value = "rrqr-dual", value_parser = parse_strategy)]
        strategy: InitStrategy,
    },
    /// Write a diagnostics report for an adapted checkpoint.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Directory for per-layer cosine heatmap CSVs.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Adapt the synthetic two-layer task and write report and checkpoint.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold adapters into dense weights.
    Merge {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_strategy(s: &str) -> Result<InitStrategy, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = InitStrategy::ALL.iter().map(|v| v.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match cli.threads {
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?
            .install(|| commands::dispatch(cli)),
        None => commands::dispatch(cli),
    }
}
