//! Differences between two fields on the same grid.

use serde::{Deserialize, Serialize};

use crate::grid::{GridError, ScalarField};
use crate::solver::boundary_cells;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldComparison {
    pub max_abs_diff: f64,
    pub safe_a: usize,
    pub safe_b: usize,
    /// Cells safe under `a` only.
    pub only_a: usize,
    /// Cells safe under `b` only.
    pub only_b: usize,
    /// Mismatched cells that are not boundary cells of both fields.
    pub outside_band: usize,
}

impl FieldComparison {
    pub fn symmetric_difference(&self) -> usize {
        self.only_a + self.only_b
    }

    /// Every mismatch lies within one cell of a zero level.
    pub fn within_band(&self) -> bool {
        self.outside_band == 0
    }
}

/// Compares 0-superlevel sets cell by cell. A mismatch is inside the band when
/// the cell is a boundary cell (a face neighbor has the opposite sign) in both
/// fields, which is what a zero level displaced by at most one cell produces.
pub fn compare_fields(a: &ScalarField, b: &ScalarField) -> Result<FieldComparison, GridError> {
    if a.grid() != b.grid() {
        return Err(GridError::ShapeMismatch);
    }
    let mut hits = vec![0u8; a.grid().len()];
    for flat in boundary_cells(a).into_iter().chain(boundary_cells(b)) {
        hits[flat] += 1;
    }
    let band: Vec<bool> = hits.into_iter().map(|h| h == 2).collect();
    let mut out = FieldComparison { max_abs_diff: 0.0, safe_a: 0, safe_b: 0, only_a: 0, only_b: 0, outside_band: 0 };
    for (flat, (&x, &y)) in a.values().iter().zip(b.values()).enumerate() {
        out.max_abs_diff = out.max_abs_diff.max((x - y).abs());
        let (sa, sb) = (x >= 0.0, y >= 0.0);
        out.safe_a += sa as usize;
        out.safe_b += sb as usize;
        if sa != sb {
            if sa {
                out.only_a += 1;
            } else {
                out.only_b += 1;
            }
            if !band[flat] {
                out.outside_band += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::sync::Arc;

    #[test]
    fn identical_fields_agree() {
        let g = Arc::new(Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![11, 11]).unwrap());
        let f = ScalarField::from_fn(g, |x| 0.5 - x[0].abs());
        let c = compare_fields(&f, &f).unwrap();
        assert_eq!((c.max_abs_diff, c.symmetric_difference(), c.outside_band), (0.0, 0, 0));
        assert_eq!(c.safe_a, c.safe_b);
    }

    #[test]
    fn one_cell_shift_is_in_band() {
        let g = Arc::new(Grid::new(vec![0.0], vec![10.0], vec![11]).unwrap());
        let a = ScalarField::from_fn(g.clone(), |x| 5.0 - x[0]);
        // Zero level moved by one cell.
        let b = ScalarField::from_fn(g.clone(), |x| 6.0 - x[0]);
        let c = compare_fields(&a, &b).unwrap();
        assert_eq!((c.only_a, c.only_b, c.outside_band), (0, 1, 0));
        // An isolated unsafe cell deep inside the safe set counts outside the band.
        let mut d = a.clone();
        d.values_mut()[1] = -1.0;
        let c = compare_fields(&a, &d).unwrap();
        assert_eq!((c.only_a, c.outside_band), (1, 1));
        // Moving the level by two cells puts both mismatches outside.
        let e = ScalarField::from_fn(g, |x| 7.0 - x[0]);
        let c = compare_fields(&a, &e).unwrap();
        assert_eq!((c.only_b, c.outside_band), (2, 2));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = ScalarField::constant(Arc::new(Grid::new(vec![0.0], vec![1.0], vec![3]).unwrap()), 1.0);
        let b = ScalarField::constant(Arc::new(Grid::new(vec![0.0], vec![1.0], vec![4]).unwrap()), 1.0);
        assert!(compare_fields(&a, &b).is_err());
    }
}
