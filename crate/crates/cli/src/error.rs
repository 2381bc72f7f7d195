use std::path::{Path, PathBuf};

use thiserror::Error;

use hjpatch::barrier::FormatError;
use hjpatch::contour::ContourError;
use hjpatch::grid::GridError;
use hjpatch::rollout::RolloutError;
use hjpatch::solver::SolveError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
    pub const CERTIFICATE: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{0}")]
    Input(String),
    #[error("grid mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("certificate failed at {violations} of {boundary_cells} boundary cells")]
    Certificate { violations: usize, boundary_cells: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        CliError::Format { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Input(_) | CliError::ShapeMismatch(_) => exit::IO,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::Certificate { .. } => exit::CERTIFICATE,
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::InvalidConfig(_) | SolveError::Numerics(_) => CliError::Config(e.to_string()),
            SolveError::DimensionMismatch { .. } | SolveError::Grid(_) => CliError::ShapeMismatch(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::OutOfDomain { .. } => CliError::Input(e.to_string()),
            _ => CliError::ShapeMismatch(e.to_string()),
        }
    }
}

impl From<ContourError> for CliError {
    fn from(e: ContourError) -> Self {
        match e {
            ContourError::Grid(g) => g.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::InvalidConfig(_) | RolloutError::Filter(_) | RolloutError::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            RolloutError::StartOutsideGrid { .. } => CliError::Input(e.to_string()),
            RolloutError::EmptyBatch | RolloutError::EmptySafeSet { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
