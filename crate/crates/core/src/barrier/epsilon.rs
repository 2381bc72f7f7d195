//! Grid measure of how leaky an almost-barrier is: the fraction of cells on
//! the inner side of its zero level where the barrier inequality fails.

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlAffine;
use crate::grid::ScalarField;
use crate::numerics::{Kernel, NumericsConfig};
use crate::solver::{check_dims, evaluate_cells, SolveError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    /// Violating boundary cells over all boundary cells; zero when vacuous.
    pub epsilon: f64,
    pub boundary_cells: usize,
    pub violating_cells: Vec<Vec<usize>>,
    /// No boundary cells at all, so the ratio carries no information.
    pub vacuous: bool,
    pub step: f64,
}

/// Cells with `h >= 0` that have a stencil neighbor with `h < 0`.
pub fn inner_boundary_cells(h: &ScalarField) -> Vec<usize> {
    let grid = h.grid();
    let values = h.values();
    let mut index = vec![0usize; grid.ndim()];
    let mut out = Vec::new();
    for (flat, &v) in values.iter().enumerate() {
        if v >= 0.0 {
            let mut outside = false;
            grid.for_each_cross_neighbor(flat, &index, 1, |nb| outside |= values[nb] < 0.0);
            if outside {
                out.push(flat);
            }
        }
        grid.advance(&mut index);
    }
    out
}

/// A boundary cell violates when `max_u L_f h + gamma h` is negative by more
/// than `tol` per solver step, i.e. `dt * (H + gamma h) < -tol` with the CFL
/// step of the numerical Hamiltonian.
pub fn measure_epsilon(
    h: &ScalarField,
    d: &dyn ControlAffine,
    gamma: f64,
    numerics: &NumericsConfig,
    tol: f64,
) -> Result<EpsilonReport, SolveError> {
    numerics.validate()?;
    check_dims(h, d.state_dim())?;
    if !(gamma >= 0.0) {
        return Err(SolveError::InvalidConfig(format!("gamma must be nonnegative, got {gamma}")));
    }
    let grid = h.grid();
    let boundary = inner_boundary_cells(h);
    let kernel = Kernel::new(d, grid, numerics);
    let mut hamiltonians = vec![0.0; boundary.len()];
    evaluate_cells(&kernel, h.values(), &boundary, &mut hamiltonians)
        .map_err(|flat| SolveError::NonFiniteValue { index: grid.unravel(flat) })?;
    let step = kernel.step(numerics);
    let violating_cells: Vec<Vec<usize>> = boundary
        .iter()
        .zip(&hamiltonians)
        .filter(|&(&flat, &ham)| step * (ham + gamma * h.values()[flat]) < -tol)
        .map(|(&flat, _)| grid.unravel(flat))
        .collect();
    let vacuous = boundary.is_empty();
    let epsilon = if vacuous { 0.0 } else { violating_cells.len() as f64 / boundary.len() as f64 };
    Ok(EpsilonReport { epsilon, boundary_cells: boundary.len(), violating_cells, vacuous, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AxisBound, BoxConstraint, DoubleIntegrator};
    use crate::grid::Grid;
    use std::sync::Arc;

    fn di_grid() -> Arc<Grid> {
        Arc::new(Grid::new(vec![-1.5, -2.5], vec![1.5, 2.5], vec![41, 41]).unwrap())
    }

    #[test]
    fn empty_boundary_is_vacuous() {
        let h = ScalarField::constant(di_grid(), -1.0);
        let r = measure_epsilon(&h, &DoubleIntegrator::new(1.0), 1.0, &NumericsConfig::default(), 1e-4).unwrap();
        assert!(r.vacuous);
        assert_eq!(r.epsilon, 0.0);
        assert_eq!(r.boundary_cells, 0);
    }

    #[test]
    fn raw_constraint_leaks_where_velocity_points_out() {
        let g = di_grid();
        let h = BoxConstraint::new(vec![AxisBound { axis: 0, lo: -1.0, hi: 1.0 }]).field(g.clone());
        let r = measure_epsilon(&h, &DoubleIntegrator::new(1.0), 1.0, &NumericsConfig::default(), 1e-4).unwrap();
        assert!(r.epsilon > 0.0 && r.epsilon < 1.0);
        for idx in &r.violating_cells {
            let x = g.state_of(idx).unwrap();
            // Right wall leaks with v > 0, left wall with v < 0.
            assert!(x[0] * x[1] > 0.0, "{x:?}");
        }
    }

    #[test]
    fn boundary_cells_are_inside() {
        let g = Arc::new(Grid::new(vec![0.0], vec![4.0], vec![5]).unwrap());
        let h = ScalarField::new(g, vec![-1.0, 0.5, 1.0, 0.0, -2.0]).unwrap();
        assert_eq!(inner_boundary_cells(&h), vec![1, 3]);
    }
}
