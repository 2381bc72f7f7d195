//! 2-D slices of a field and polylines of their zero level, for plotting.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{Grid, GridError, ScalarField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContourError {
    #[error("slice axes {dims:?} are invalid for a {ndim}-dimensional grid")]
    Axes { dims: [usize; 2], ndim: usize },
    #[error("{found} fixed values given, the slice needs {expected}")]
    FixedCount { expected: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub dims: [usize; 2],
    /// Values of the remaining axes, in increasing axis order.
    pub fixed: Vec<f64>,
    /// Field on the 2-D grid spanned by `dims`.
    pub field: ScalarField,
}

/// Restricts `field` to the plane through `fixed` spanned by axes `dims`,
/// interpolating along the fixed axes.
pub fn slice(field: &ScalarField, dims: [usize; 2], fixed: &[f64]) -> Result<Slice, ContourError> {
    let g = field.grid();
    let n = g.ndim();
    if dims[0] == dims[1] || dims[0] >= n || dims[1] >= n {
        return Err(ContourError::Axes { dims, ndim: n });
    }
    if fixed.len() != n - 2 {
        return Err(ContourError::FixedCount { expected: n - 2, found: fixed.len() });
    }
    let mut x = vec![0.0; n];
    let mut rest = fixed.iter();
    for (axis, xi) in x.iter_mut().enumerate() {
        if !dims.contains(&axis) {
            *xi = *rest.next().expect("count checked");
        }
    }
    let (a, b) = (dims[0], dims[1]);
    let sub = Arc::new(Grid::new(vec![g.lo()[a], g.lo()[b]], vec![g.hi()[a], g.hi()[b]], vec![g.shape()[a], g.shape()[b]])?);
    let mut values = Vec::with_capacity(sub.len());
    for i in 0..g.shape()[a] {
        for j in 0..g.shape()[b] {
            x[a] = g.coordinate(a, i);
            x[b] = g.coordinate(b, j);
            values.push(field.interpolate(&x)?);
        }
    }
    Ok(Slice { dims, fixed: fixed.to_vec(), field: ScalarField::new(sub, values)? })
}

/// Zero-level polylines of a 2-D field by marching squares. Closed curves
/// repeat their first point at the end. Ambiguous squares are resolved by the
/// average of their corners; cells at exactly zero count as inside.
pub fn zero_contours(field: &ScalarField) -> Result<Vec<Vec<[f64; 2]>>, ContourError> {
    let g = field.grid();
    if g.ndim() != 2 {
        return Err(ContourError::Axes { dims: [0, 1], ndim: g.ndim() });
    }
    let (nx, ny) = (g.shape()[0], g.shape()[1]);
    let v = |i: usize, j: usize| field.values()[i * ny + j];
    let inside = |x: f64| x >= 0.0;
    // Edge ids: 2 * cell + axis, for the edge leaving the cell along the axis.
    let edge = |i: usize, j: usize, axis: usize| 2 * (i * ny + j) + axis;
    let point = |id: usize| -> [f64; 2] {
        let (cell, axis) = (id / 2, id % 2);
        let (i, j) = (cell / ny, cell % ny);
        let (a, b) = if axis == 0 { (v(i, j), v(i + 1, j)) } else { (v(i, j), v(i, j + 1)) };
        let t = (a / (a - b)).clamp(0.0, 1.0);
        let mut p = [g.coordinate(0, i), g.coordinate(1, j)];
        p[axis] += t * g.spacing()[axis];
        p
    };
    let mut links: Vec<[usize; 2]> = vec![[usize::MAX; 2]; 2 * nx * ny];
    let mut link = |p: usize, q: usize| {
        for (from, to) in [(p, q), (q, p)] {
            let slot = &mut links[from];
            if slot[0] == usize::MAX {
                slot[0] = to;
            } else {
                slot[1] = to;
            }
        }
    };
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            let e = [edge(i, j, 0), edge(i + 1, j, 1), edge(i, j + 1, 0), edge(i, j, 1)];
            let crossed: Vec<usize> = (0..4).filter(|&k| inside(c[k]) != inside(c[(k + 1) % 4])).collect();
            match crossed.len() {
                2 => link(e[crossed[0]], e[crossed[1]]),
                4 => {
                    let center = c.iter().sum::<f64>() / 4.0;
                    if inside(center) == inside(c[0]) {
                        link(e[0], e[1]);
                        link(e[2], e[3]);
                    } else {
                        link(e[3], e[0]);
                        link(e[1], e[2]);
                    }
                }
                _ => {}
            }
        }
    }
    let degree = |s: &[usize; 2]| s.iter().filter(|&&t| t != usize::MAX).count();
    let mut used = vec![false; links.len()];
    let mut out = Vec::new();
    // Open curves start at their ends, then whatever is left forms loops.
    for pass in 0..2 {
        for start in 0..links.len() {
            let d = degree(&links[start]);
            if used[start] || d == 0 || (pass == 0 && d != 1) {
                continue;
            }
            let mut line = vec![point(start)];
            used[start] = true;
            let (mut prev, mut cur) = (usize::MAX, start);
            loop {
                let next = links[cur].iter().copied().find(|&t| t != usize::MAX && t != prev && !used[t]);
                match next {
                    Some(t) => {
                        used[t] = true;
                        line.push(point(t));
                        prev = cur;
                        cur = t;
                    }
                    None => {
                        if pass == 1 {
                            line.push(line[0]);
                        }
                        break;
                    }
                }
            }
            out.push(line);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(n: usize) -> ScalarField {
        let g = Arc::new(Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![n, n]).unwrap());
        ScalarField::from_fn(g, |x| 0.6 - (x[0] * x[0] + x[1] * x[1]).sqrt())
    }

    #[test]
    fn circle_gives_one_closed_curve() {
        let f = circle(41);
        let lines = zero_contours(&f).unwrap();
        assert_eq!(lines.len(), 1);
        let l = &lines[0];
        assert_eq!(l.first(), l.last());
        let h = f.grid().max_spacing();
        for p in l {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 0.6).abs() < h);
        }
        // Goes all the way around.
        let perimeter: f64 = l.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum();
        assert!((perimeter - 2.0 * std::f64::consts::PI * 0.6).abs() < 0.05, "{perimeter}");
    }

    #[test]
    fn curve_leaving_the_box_is_open() {
        let g = Arc::new(Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![21, 21]).unwrap());
        let f = ScalarField::from_fn(g, |x| x[0] - 0.3 * x[1] + 0.05);
        let lines = zero_contours(&f).unwrap();
        assert_eq!(lines.len(), 1);
        assert_ne!(lines[0].first(), lines[0].last());
        for p in &lines[0] {
            assert!((p[0] - 0.3 * p[1] + 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn no_crossing_gives_nothing() {
        let g = Arc::new(Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5]).unwrap());
        assert!(zero_contours(&ScalarField::constant(g, 1.0)).unwrap().is_empty());
    }

    #[test]
    fn slicing_a_ball() {
        let g = Arc::new(Grid::new(vec![-1.0; 3], vec![1.0; 3], vec![21, 21, 21]).unwrap());
        let f = ScalarField::from_fn(g, |x| 0.36 - x.iter().map(|v| v * v).sum::<f64>());
        // Plane z = 0 through axes 0 and 1; plane y = 0.3 through axes 0 and 2.
        let s = slice(&f, [0, 1], &[0.0]).unwrap();
        assert_eq!(s.field.grid().shape(), &[21, 21]);
        assert_eq!(zero_contours(&s.field).unwrap().len(), 1);
        let s = slice(&f, [0, 2], &[0.3]).unwrap();
        for p in &zero_contours(&s.field).unwrap()[0] {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - (0.36f64 - 0.09).sqrt()).abs() < 0.1);
        }
        assert!(matches!(slice(&f, [0, 1], &[2.0]), Err(ContourError::Grid(GridError::OutOfDomain { .. }))));
        assert!(matches!(slice(&f, [0, 0], &[0.0]), Err(ContourError::Axes { .. })));
        assert!(matches!(slice(&f, [0, 1], &[]), Err(ContourError::FixedCount { .. })));
    }
}
