//! Warm-started dynamic programming over the whole grid.

use std::time::Instant;

use rayon::prelude::*;

use super::{check_dims, evaluate_all, validate, ConvergenceConfig, Solution, SolveError, SolveStats};
use crate::dynamics::ControlAffine;
use crate::grid::ScalarField;
use crate::numerics::{Kernel, NumericsConfig};

#[derive(Debug, Clone)]
pub struct GlobalStep {
    pub field: ScalarField,
    pub max_decrease: f64,
    pub evals: u64,
    pub dt: f64,
}

/// One Jacobi sweep `V' = V + dt * min(0, H_LF(V))` over every cell.
pub fn global_step(
    v: &ScalarField,
    d: &dyn ControlAffine,
    cfg: &NumericsConfig,
) -> Result<GlobalStep, SolveError> {
    cfg.validate()?;
    check_dims(v, d.state_dim())?;
    let kernel = Kernel::new(d, v.grid(), cfg);
    let mut next = vec![0.0; v.grid().len()];
    let (max_decrease, dt) = sweep(&kernel, cfg, v, &mut next)?;
    Ok(GlobalStep {
        field: ScalarField::new(v.grid().clone(), next)?,
        max_decrease,
        evals: v.grid().len() as u64,
        dt,
    })
}

/// Writes the swept field into `next`; returns `(max decrease, dt)`.
fn sweep(
    kernel: &Kernel<'_>,
    cfg: &NumericsConfig,
    v: &ScalarField,
    next: &mut [f64],
) -> Result<(f64, f64), SolveError> {
    let values = v.values();
    evaluate_all(kernel, values, next)
        .map_err(|flat| SolveError::NonFiniteValue { index: v.grid().unravel(flat) })?;
    let dt = kernel.step(cfg);
    let max_decrease = next
        .par_iter_mut()
        .zip(values.par_iter())
        .map(|(h, &old)| {
            let new = old + dt * h.min(0.0);
            *h = new;
            old - new
        })
        .reduce(|| 0.0, f64::max);
    Ok((max_decrease, dt))
}

/// Iterates [`global_step`] until the largest decrease of a sweep is at most
/// `conv.tol`. On hitting `conv.max_sweeps` the last iterate is returned inside
/// [`SolveError::NonConvergence`].
pub fn solve_global(
    v0: &ScalarField,
    d: &dyn ControlAffine,
    cfg: &NumericsConfig,
    conv: &ConvergenceConfig,
) -> Result<Solution, SolveError> {
    validate(cfg, conv)?;
    check_dims(v0, d.state_dim())?;
    if let Some(flat) = v0.first_non_finite() {
        return Err(SolveError::NonFiniteValue { index: v0.grid().unravel(flat) });
    }
    let start = Instant::now();
    let grid = v0.grid().clone();
    let kernel = Kernel::new(d, &grid, cfg);
    let mut current = v0.clone();
    let mut next = vec![0.0; grid.len()];
    let mut stats = SolveStats::default();

    while stats.sweeps < conv.max_sweeps {
        let (max_decrease, _dt) = sweep(&kernel, cfg, &current, &mut next)?;
        current.swap_values(&mut next);
        stats.sweeps += 1;
        stats.hamiltonian_evals += grid.len() as u64;
        stats.max_residual_history.push(max_decrease);
        if stats.sweeps % 500 == 0 {
            log::debug!("global sweep {}: max decrease {:e}", stats.sweeps, max_decrease);
        }
        if max_decrease <= conv.tol {
            stats.converged = true;
            break;
        }
    }
    stats.wall_time = start.elapsed().as_secs_f64();
    let solution = Solution { field: current, stats };
    if solution.stats.converged {
        Ok(solution)
    } else {
        Err(SolveError::NonConvergence { partial: Box::new(solution) })
    }
}
