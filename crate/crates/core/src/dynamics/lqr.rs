//! Continuous-time LQR by integrating the Riccati differential equation to
//! its fixed point.

use nalgebra::DMatrix;

use super::{ControlAffine, DynamicsError, Policy};

const MAX_ITERATIONS: usize = 2_000_000;
const FIXED_POINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LqrSolution {
    /// Feedback gain, `m x n`.
    pub gain: DMatrix<f64>,
    /// Stabilizing solution of the algebraic Riccati equation.
    pub value: DMatrix<f64>,
    pub iterations: usize,
}

impl LqrSolution {
    /// `u = u_ref - K (x - x_ref)`.
    pub fn policy(&self, x_ref: Vec<f64>, u_ref: Vec<f64>) -> Policy {
        let gain = self
            .gain
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        Policy::Linear { gain, x_ref, u_ref }
    }
}

/// `A^T P + P A - P B R^-1 B^T P + Q`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let r_inv = r.clone().try_inverse()?;
    let s = b * r_inv * b.transpose();
    Some(riccati_rhs(a, &s, q, p))
}

fn riccati_rhs(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * s * p + q
}

pub fn solve_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LqrSolution, DynamicsError> {
    let n = a.nrows();
    let m = b.ncols();
    for (rows, cols, want_rows, want_cols) in [
        (a.nrows(), a.ncols(), n, n),
        (b.nrows(), b.ncols(), n, m),
        (q.nrows(), q.ncols(), n, n),
        (r.nrows(), r.ncols(), m, m),
    ] {
        if rows != want_rows {
            return Err(DynamicsError::DimensionMismatch { expected: want_rows, found: rows });
        }
        if cols != want_cols {
            return Err(DynamicsError::DimensionMismatch { expected: want_cols, found: cols });
        }
    }
    let chol = r.clone().cholesky().ok_or(DynamicsError::NotPositiveDefinite)?;
    let s = b * chol.solve(&b.transpose());

    // Explicit RK4 on P' = rhs(P) from P = 0, with the step shrunk as P grows.
    let a_norm = a.norm();
    let s_norm = s.norm();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut residual = f64::INFINITY;
    for it in 0..MAX_ITERATIONS {
        let k1 = riccati_rhs(a, &s, q, &p);
        residual = k1.norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= FIXED_POINT_TOL * p.norm().max(1.0) {
            let gain = chol.solve(&(b.transpose() * &p));
            check_stable(&(a - b * &gain))?;
            return Ok(LqrSolution { gain, value: p, iterations: it });
        }
        let h = 0.1 / (1.0 + 2.0 * a_norm + 2.0 * s_norm * p.norm());
        let k2 = riccati_rhs(a, &s, q, &(&p + &k1 * (0.5 * h)));
        let k3 = riccati_rhs(a, &s, q, &(&p + &k2 * (0.5 * h)));
        let k4 = riccati_rhs(a, &s, q, &(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p = (&p + p.transpose()) * 0.5;
    }
    Err(DynamicsError::NonConvergence { iterations: MAX_ITERATIONS, residual })
}

fn check_stable(closed: &DMatrix<f64>) -> Result<(), DynamicsError> {
    let max_real_part = closed
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_real_part < 0.0 {
        Ok(())
    } else {
        Err(DynamicsError::NotStabilizing { max_real_part })
    }
}

/// Jacobians `(A, B)` at `(x, u)`: `B = G(x)` exactly, `A` by central differences.
pub fn linearize(d: &dyn ControlAffine, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = d.state_dim();
    let m = d.input_dim();
    let mut g = vec![0.0; n * m];
    d.input_matrix(x, &mut g);
    let b = DMatrix::from_row_slice(n, m, &g);
    let mut a = DMatrix::zeros(n, n);
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        d.flow_into(&xp, u, &mut g, &mut fp);
        xp[j] = x[j] - h;
        d.flow_into(&xp, u, &mut g, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (a, b)
}
