//! Signed-distance reconstruction: keep the sign of every cell, replace its
//! magnitude by the Euclidean distance to the piecewise-linear zero set.

use rayon::prelude::*;

use crate::grid::{Grid, ScalarField};

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub field: ScalarField,
    /// Set when the field has no zero crossing; `field` is then the input.
    pub no_zero_set: bool,
    /// Number of crossing primitives (points or segments) measured against.
    pub primitives: usize,
}

/// Piece of the zero set: a point, or a segment in two dimensions.
#[derive(Debug, Clone)]
enum Primitive {
    Point(Vec<f64>),
    Segment([f64; 2], [f64; 2]),
}

impl Primitive {
    fn lower(&self) -> f64 {
        match self {
            Primitive::Point(p) => p[0],
            Primitive::Segment(a, b) => a[0].min(b[0]),
        }
    }

    fn upper(&self) -> f64 {
        match self {
            Primitive::Point(p) => p[0],
            Primitive::Segment(a, b) => a[0].max(b[0]),
        }
    }

    fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Primitive::Point(p) => p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            Primitive::Segment(a, b) => {
                let d = [b[0] - a[0], b[1] - a[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let t = if len2 > 0.0 { (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let p = [a[0] + t * d[0], a[1] + t * d[1]];
                ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)).sqrt()
            }
        }
    }
}

fn inside(v: f64) -> bool {
    v >= 0.0
}

/// Zero of the linear interpolant between `a` (at 0) and `b` (at 1), for
/// values on opposite sides.
fn crossing(a: f64, b: f64) -> f64 {
    if a == b {
        0.5
    } else {
        (a / (a - b)).clamp(0.0, 1.0)
    }
}

/// Crossing points on grid edges, used in every dimension but two.
fn edge_points(field: &ScalarField) -> Vec<Primitive> {
    let grid = field.grid();
    let values = field.values();
    let mut index = vec![0usize; grid.ndim()];
    let mut x = vec![0.0; grid.ndim()];
    let mut out = Vec::new();
    for (flat, &v) in values.iter().enumerate() {
        grid.state_into(&index, &mut x);
        if v == 0.0 {
            out.push(Primitive::Point(x.clone()));
        }
        for d in 0..grid.ndim() {
            if index[d] + 1 < grid.shape()[d] {
                let w = values[flat + grid.strides()[d]];
                if inside(v) != inside(w) && v != 0.0 {
                    let mut p = x.clone();
                    p[d] += crossing(v, w) * grid.spacing()[d];
                    out.push(Primitive::Point(p));
                }
            }
        }
        grid.advance(&mut index);
    }
    out
}

/// Marching-squares segments of the zero level in a 2-D field.
fn square_segments(field: &ScalarField) -> Vec<Primitive> {
    let grid = field.grid();
    let (nx, ny) = (grid.shape()[0], grid.shape()[1]);
    let (hx, hy) = (grid.spacing()[0], grid.spacing()[1]);
    let v = |i: usize, j: usize| field.values()[i * ny + j];
    let mut out = Vec::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let x0 = grid.coordinate(0, i);
            let y0 = grid.coordinate(1, j);
            // Corners counter-clockwise from (i, j).
            let c = [(0.0, 0.0, v(i, j)), (1.0, 0.0, v(i + 1, j)), (1.0, 1.0, v(i + 1, j + 1)), (0.0, 1.0, v(i, j + 1))];
            let mut pts: Vec<[f64; 2]> = Vec::with_capacity(4);
            for k in 0..4 {
                let (ax, ay, a) = c[k];
                let (bx, by, b) = c[(k + 1) % 4];
                if inside(a) != inside(b) {
                    let t = crossing(a, b);
                    pts.push([x0 + (ax + t * (bx - ax)) * hx, y0 + (ay + t * (by - ay)) * hy]);
                }
            }
            match pts.len() {
                2 => out.push(Primitive::Segment(pts[0], pts[1])),
                4 => {
                    // Saddle: the center average decides which pairs connect.
                    let center = (c[0].2 + c[1].2 + c[2].2 + c[3].2) / 4.0;
                    if inside(center) == inside(c[0].2) {
                        out.push(Primitive::Segment(pts[0], pts[1]));
                        out.push(Primitive::Segment(pts[2], pts[3]));
                    } else {
                        out.push(Primitive::Segment(pts[3], pts[0]));
                        out.push(Primitive::Segment(pts[1], pts[2]));
                    }
                }
                _ => {}
            }
        }
    }
    // Cells sitting exactly on zero belong to the zero set even without a crossing.
    let mut index = vec![0usize; 2];
    let mut x = vec![0.0; 2];
    for &val in field.values() {
        if val == 0.0 {
            grid.state_into(&index, &mut x);
            out.push(Primitive::Point(x.clone()));
        }
        grid.advance(&mut index);
    }
    out
}

/// Exact nearest distance by scanning primitives sorted on their first
/// coordinate, stopping once the coordinate gap alone exceeds the best hit.
/// `reach` bounds how far any primitive extends above its lower bound.
fn nearest(prims: &[Primitive], lowers: &[f64], reach: f64, x: &[f64]) -> f64 {
    let start = lowers.partition_point(|&l| l < x[0]);
    let mut best = f64::INFINITY;
    // Upward: lower bounds only grow.
    for p in &prims[start..] {
        if p.lower() - x[0] > best {
            break;
        }
        best = best.min(p.distance(x));
    }
    // Downward: primitives may extend past their lower bound by up to `reach`.
    for p in prims[..start].iter().rev() {
        if x[0] - p.lower() - reach > best {
            break;
        }
        best = best.min(p.distance(x));
    }
    best
}

pub fn signed_distance_reconstruct(field: &ScalarField) -> Reconstruction {
    let grid: &Grid = field.grid();
    let mut prims = if grid.ndim() == 2 { square_segments(field) } else { edge_points(field) };
    if prims.is_empty() {
        log::warn!("field has no zero crossing; signed distance left unchanged");
        return Reconstruction { field: field.clone(), no_zero_set: true, primitives: 0 };
    }
    prims.sort_by(|a, b| a.lower().total_cmp(&b.lower()));
    let lowers: Vec<f64> = prims.iter().map(Primitive::lower).collect();
    let reach = prims.iter().map(|p| p.upper() - p.lower()).fold(0.0, f64::max);
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|flat| {
            let x = grid.state_of(&grid.unravel(flat)).expect("flat index in range");
            let d = nearest(&prims, &lowers, reach, &x);
            let orig = field.values()[flat];
            if inside(orig) {
                d
            } else if d > 0.0 {
                -d
            } else {
                // Keep the sign of outside cells sitting on the zero set.
                orig
            }
        })
        .collect();
    let field = ScalarField::new(field.grid().clone(), values).expect("same grid");
    Reconstruction { field, no_zero_set: false, primitives: prims.len() }
}
