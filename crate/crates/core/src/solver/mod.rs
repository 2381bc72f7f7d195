//! Dynamic-programming solvers for the viability value function.
//!
//! [`global`] updates every cell each sweep and serves as the reference;
//! [`patch`] updates only an active set of cells near the zero level set.

pub mod global;
pub mod patch;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, ScalarField};
use crate::numerics::{ConfigError, Kernel, NumericsConfig};

pub use global::{global_step, solve_global, GlobalStep};
pub use patch::{
    boundary_cells, default_zeta, init_active_set, invariance_certificate, patch, patch_iteration,
    ActiveSet, CertificateReport, IterationOutcome, PatchConfig, PatchParams, PatchSolution, Violation,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Largest per-cell decrease in one sweep that still counts as converged.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { tol: 1e-4, max_sweeps: 100_000 }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.tol > 0.0) {
            return Err(SolveError::InvalidConfig(format!("convergence tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub sweeps: usize,
    /// Per-cell Hamiltonian evaluations, summed over sweeps.
    pub hamiltonian_evals: u64,
    /// Largest per-cell decrease of each sweep.
    pub max_residual_history: Vec<f64>,
    pub converged: bool,
    /// Seconds; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub field: ScalarField,
    pub stats: SolveStats,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("non-finite value at cell {index:?}")]
    NonFiniteValue { index: Vec<usize> },
    #[error("no convergence after {} sweeps (last max decrease {:e})", .partial.stats.sweeps,
        .partial.stats.max_residual_history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { partial: Box<Solution> },
    #[error("active set still holds cells after {} iterations", .partial.stats.sweeps)]
    PatchNonConvergence { partial: Box<PatchSolution> },
    #[error("state dimension {dynamics} does not match grid dimension {grid}")]
    DimensionMismatch { dynamics: usize, grid: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Numerics(#[from] ConfigError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

const CHUNK: usize = 4096;

/// Numerical Hamiltonian at every cell of `values` (Jacobi: reads only
/// `values`). Writes into `out`; fails with the first cell whose value was
/// not finite.
pub(crate) fn evaluate_all(kernel: &Kernel<'_>, values: &[f64], out: &mut [f64]) -> Result<(), usize> {
    out.par_chunks_mut(CHUNK).enumerate().try_for_each(|(chunk, out)| {
        let mut s = kernel.scratch();
        let start = chunk * CHUNK;
        kernel.grid.unravel_into(start, &mut s.index);
        for (k, o) in out.iter_mut().enumerate() {
            let flat = start + k;
            let h = kernel.eval(values, flat, &mut s);
            if !h.is_finite() || !values[flat].is_finite() {
                return Err(flat);
            }
            *o = h;
            kernel.grid.advance(&mut s.index);
        }
        Ok(())
    })
}

/// Same as [`evaluate_all`] restricted to `cells`; `out[k]` belongs to `cells[k]`.
pub(crate) fn evaluate_cells(
    kernel: &Kernel<'_>,
    values: &[f64],
    cells: &[usize],
    out: &mut [f64],
) -> Result<(), usize> {
    out.par_chunks_mut(CHUNK).zip(cells.par_chunks(CHUNK)).try_for_each(|(out, cells)| {
        let mut s = kernel.scratch();
        for (o, &flat) in out.iter_mut().zip(cells) {
            kernel.grid.unravel_into(flat, &mut s.index);
            let h = kernel.eval(values, flat, &mut s);
            if !h.is_finite() || !values[flat].is_finite() {
                return Err(flat);
            }
            *o = h;
        }
        Ok(())
    })
}

pub(crate) fn check_dims(field: &ScalarField, dynamics_dim: usize) -> Result<(), SolveError> {
    if field.grid().ndim() != dynamics_dim {
        return Err(SolveError::DimensionMismatch { dynamics: dynamics_dim, grid: field.grid().ndim() });
    }
    Ok(())
}

pub(crate) fn validate(numerics: &NumericsConfig, conv: &ConvergenceConfig) -> Result<(), SolveError> {
    numerics.validate()?;
    conv.validate()
}
