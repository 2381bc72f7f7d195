//! Command-line front end: reads a TOML run configuration and field files,
//! runs the solvers, filter and diagnostics, and writes fields, CSV data and
//! JSON reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "hjpatch", version, about = "Viability value functions: global solves, local patching, safety filtering")]
pub struct Cli {
    /// Worker threads; falls back to HJPATCH_THREADS, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the JSON report; defaults to `<output dir>/<command>_report.json`.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Global dynamic-programming solve.
    Solve {
        #[command(flatten)]
        config: ConfigArg,
        /// A field file, or `constraint` to start from the constraint margin.
        #[arg(long, default_value = "constraint")]
        init: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit successfully even when the sweep budget runs out.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Local active-set repair of an almost-barrier.
    Patch {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        init: PathBuf,
        /// Mask of cells to leave untouched.
        #[arg(long)]
        certified: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_partial: bool,
    },
    /// Seeded closed-loop rollouts through the safety filter.
    Rollout {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Seconds.
        #[arg(long)]
        horizon: Option<f64>,
        /// Apply the nominal policy directly.
        #[arg(long)]
        unfiltered: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pointwise and safe-set differences between two fields on one grid.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Directory for per-projection contour files.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Fraction of zero-level cells where the barrier inequality fails.
    Epsilon {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        field: PathBuf,
    },
    /// A 2-D slice of a field and its zero-level polylines as CSV.
    Contours {
        #[arg(long)]
        field: PathBuf,
        /// Two axes, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Values of the remaining axes in increasing axis order.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        slice: Vec<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Builds a field (or mask) file from CSV samples at the grid cells.
    Import {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write a mask: nonzero values mark certified cells.
        #[arg(long)]
        mask: bool,
    },
    /// Writes a field (or mask) file as CSV samples.
    Export {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturbs a field as described by the configuration's `perturbation`.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replaces magnitudes by the distance to the zero level, keeping signs.
    Reconstruct {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Thread count from the flag, then the environment.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("HJPATCH_THREADS") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("HJPATCH_THREADS must be a count, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Runs one command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        // Fails only if a pool already exists, e.g. when called twice in-process.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    commands::dispatch(cli.command, cli.report)
}
