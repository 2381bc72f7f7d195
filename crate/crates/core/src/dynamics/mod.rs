//! Control-affine systems `x' = drift(x) + G(x) u` with box input bounds.

mod lqr;
mod systems;

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, ScalarField};

pub use lqr::{linearize, riccati_residual, solve_lqr, LqrSolution};
pub use systems::{DoubleIntegrator, LinearSystem, PlanarQuad6d, Quad4d, QuadParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("input {input} = {value} outside [{lo}, {hi}]")]
    InputOutOfBounds { input: usize, value: f64, lo: f64, hi: f64 },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("weight matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("closed loop A - BK is not Hurwitz (max real part {max_real_part})")]
    NotStabilizing { max_real_part: f64 },
    #[error("dynamics returned a non-finite value at {state:?}")]
    NonFinite { state: Vec<f64> },
}

/// A control-affine system. The input matrix is written row-major, `n x m`.
pub trait ControlAffine: Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn input_matrix(&self, x: &[f64], out: &mut [f64]);
    fn input_lo(&self) -> &[f64];
    fn input_hi(&self) -> &[f64];

    /// `drift(x) + G(x) u` with caller-provided scratch for `G`.
    fn flow_into(&self, x: &[f64], u: &[f64], g_scratch: &mut [f64], out: &mut [f64]) {
        let n = self.state_dim();
        let m = self.input_dim();
        self.drift(x, out);
        if m == 0 {
            return;
        }
        self.input_matrix(x, g_scratch);
        for i in 0..n {
            let row = &g_scratch[i * m..(i + 1) * m];
            out[i] += row.iter().zip(u).map(|(g, u)| g * u).sum::<f64>();
        }
    }
}

impl<T: ControlAffine + ?Sized> ControlAffine for Arc<T> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (**self).drift(x, out)
    }
    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        (**self).input_matrix(x, out)
    }
    fn input_lo(&self) -> &[f64] {
        (**self).input_lo()
    }
    fn input_hi(&self) -> &[f64] {
        (**self).input_hi()
    }
}

fn check_input_bounds(d: &dyn ControlAffine, u: &[f64]) -> Result<(), DynamicsError> {
    if u.len() != d.input_dim() {
        return Err(DynamicsError::DimensionMismatch { expected: d.input_dim(), found: u.len() });
    }
    for (i, ((&v, &lo), &hi)) in u.iter().zip(d.input_lo()).zip(d.input_hi()).enumerate() {
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if !(v >= lo - slack && v <= hi + slack) {
            return Err(DynamicsError::InputOutOfBounds { input: i, value: v, lo, hi });
        }
    }
    Ok(())
}

/// State derivative under an admissible input.
pub fn flow(d: &dyn ControlAffine, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    if x.len() != d.state_dim() {
        return Err(DynamicsError::DimensionMismatch { expected: d.state_dim(), found: x.len() });
    }
    check_input_bounds(d, u)?;
    let mut g = vec![0.0; d.state_dim() * d.input_dim()];
    let mut out = vec![0.0; d.state_dim()];
    d.flow_into(x, u, &mut g, &mut out);
    Ok(out)
}

/// Box vertex maximizing `<costate, G(x) u>`, with ties going to the upper bound.
pub fn optimal_control(d: &dyn ControlAffine, x: &[f64], costate: &[f64]) -> Vec<f64> {
    let n = d.state_dim();
    let m = d.input_dim();
    let mut g = vec![0.0; n * m];
    d.input_matrix(x, &mut g);
    (0..m)
        .map(|j| {
            let s: f64 = (0..n).map(|i| g[i * m + j] * costate[i]).sum();
            if s >= 0.0 {
                d.input_hi()[j]
            } else {
                d.input_lo()[j]
            }
        })
        .collect()
}

/// Checks that drift and input matrix are finite at every cell of `grid`.
pub fn audit_finite(d: &dyn ControlAffine, grid: &Grid) -> Result<(), DynamicsError> {
    let n = d.state_dim();
    if n != grid.ndim() {
        return Err(DynamicsError::DimensionMismatch { expected: n, found: grid.ndim() });
    }
    let mut index = vec![0usize; n];
    let mut x = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * d.input_dim()];
    loop {
        grid.state_into(&index, &mut x);
        d.drift(&x, &mut f);
        d.input_matrix(&x, &mut g);
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite { state: x });
        }
        if !grid.advance(&mut index) {
            return Ok(());
        }
    }
}

/// A fixed feedback law `u = pi(x)`, clipped to the input box on evaluation.
#[derive(Debug, Clone)]
pub enum Policy {
    /// `u = u_ref - K (x - x_ref)`, `K` given as `m` rows of length `n`.
    Linear { gain: Vec<Vec<f64>>, x_ref: Vec<f64>, u_ref: Vec<f64> },
    Constant(Vec<f64>),
    /// One interpolated field per input, e.g. a policy sampled by an external tool.
    Tabulated(Vec<ScalarField>),
}

impl Policy {
    pub fn input_dim(&self) -> usize {
        match self {
            Policy::Linear { u_ref, .. } => u_ref.len(),
            Policy::Constant(u) => u.len(),
            Policy::Tabulated(fields) => fields.len(),
        }
    }

    fn state_dim(&self) -> Option<usize> {
        match self {
            Policy::Linear { x_ref, .. } => Some(x_ref.len()),
            Policy::Constant(_) => None,
            Policy::Tabulated(fields) => fields.first().map(|f| f.grid().ndim()),
        }
    }

    /// Unclipped policy output.
    pub fn raw(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Policy::Linear { gain, x_ref, u_ref } => gain
                .iter()
                .zip(u_ref)
                .map(|(row, u0)| u0 - row.iter().zip(x).zip(x_ref).map(|((k, xi), ri)| k * (xi - ri)).sum::<f64>())
                .collect(),
            Policy::Constant(u) => u.clone(),
            Policy::Tabulated(fields) => fields
                .iter()
                .map(|f| f.interpolate_clamped(x).map(|(v, _)| v).unwrap_or(f64::NAN))
                .collect(),
        }
    }

    pub fn evaluate(&self, x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
        let mut u = self.raw(x);
        for ((u, &lo), &hi) in u.iter_mut().zip(lo).zip(hi) {
            *u = u.clamp(lo, hi);
        }
        u
    }
}

/// Closed-loop system `x' = drift(x) + G(x) pi(x)` with no remaining inputs.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    inner: Arc<dyn ControlAffine>,
    policy: Policy,
}

pub fn closed_loop(d: Arc<dyn ControlAffine>, policy: Policy) -> Result<ClosedLoop, DynamicsError> {
    if policy.input_dim() != d.input_dim() {
        return Err(DynamicsError::DimensionMismatch { expected: d.input_dim(), found: policy.input_dim() });
    }
    if let Some(n) = policy.state_dim() {
        if n != d.state_dim() {
            return Err(DynamicsError::DimensionMismatch { expected: d.state_dim(), found: n });
        }
    }
    Ok(ClosedLoop { inner: d, policy })
}

impl ClosedLoop {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }
}

impl ControlAffine for ClosedLoop {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let u = self.policy.evaluate(x, self.inner.input_lo(), self.inner.input_hi());
        let mut g = vec![0.0; self.inner.state_dim() * self.inner.input_dim()];
        self.inner.flow_into(x, &u, &mut g, out);
    }
    fn input_matrix(&self, _x: &[f64], _out: &mut [f64]) {}
    fn input_lo(&self) -> &[f64] {
        &[]
    }
    fn input_hi(&self) -> &[f64] {
        &[]
    }
}

/// Interval constraint on one state coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBound {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
}

/// The true constraint set: a product of intervals on selected coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxConstraint {
    pub bounds: Vec<AxisBound>,
}

impl BoxConstraint {
    pub fn new(bounds: Vec<AxisBound>) -> Self {
        Self { bounds }
    }

    /// Signed margin `min_k min(x_k - lo_k, hi_k - x_k)`; nonnegative inside.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.bounds
            .iter()
            .map(|b| (x[b.axis] - b.lo).min(b.hi - x[b.axis]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bounds.iter().all(|b| x[b.axis] >= b.lo && x[b.axis] <= b.hi)
    }

    /// The margin sampled on `grid`, the usual starting point of a global solve.
    pub fn field(&self, grid: Arc<Grid>) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.margin(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_integrator_flow() {
        let d = DoubleIntegrator::new(1.0);
        assert_eq!(flow(&d, &[0.0, 1.0], &[0.5]).unwrap(), vec![1.0, 0.5]);
        assert_eq!(flow(&d, &[0.3, -2.0], &[0.0]).unwrap(), vec![-2.0, 0.0]);
        assert!(matches!(flow(&d, &[0.0, 0.0], &[1.5]), Err(DynamicsError::InputOutOfBounds { .. })));
    }

    #[test]
    fn quad4d_hover_has_zero_vertical_acceleration() {
        let p = QuadParams::default();
        let d = Quad4d::new(p);
        let hover = [p.mass * p.gravity, 0.0];
        let f = flow(&d, &[1.0, 0.0, 0.0, 0.0], &hover).unwrap();
        assert_abs_diff_eq!(f[1], 0.0, epsilon = 1e-12);
        assert_eq!(f, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn planar_quad_hover_is_equilibrium() {
        let p = QuadParams::default();
        let d = PlanarQuad6d::new(p);
        let w = 0.5 * p.mass * p.gravity;
        let f = flow(&d, &[0.3, 1.0, 0.0, 0.0, 0.0, 0.0], &[w, w]).unwrap();
        for v in f {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bang_bang_examples() {
        let d = LinearSystem::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        assert_eq!(optimal_control(&d, &[0.0, 0.0], &[1.0, -1.0]), vec![1.0, -1.0]);
        assert_eq!(optimal_control(&d, &[0.0, 0.0], &[0.0, 0.0]), vec![1.0, 1.0]);
        let di = DoubleIntegrator::new(1.0);
        assert_eq!(optimal_control(&di, &[0.0, 0.0], &[0.3, -2.0]), vec![-1.0]);
    }

    #[test]
    fn closed_loop_examples() {
        let di: Arc<dyn ControlAffine> = Arc::new(DoubleIntegrator::new(10.0));
        let zero = closed_loop(di.clone(), Policy::Constant(vec![0.0])).unwrap();
        let mut f = [0.0; 2];
        zero.drift(&[0.4, -0.7], &mut f);
        assert_eq!(f.to_vec(), flow(&*di, &[0.4, -0.7], &[0.0]).unwrap());

        let pd = Policy::Linear { gain: vec![vec![1.0, 2.0]], x_ref: vec![0.0, 0.0], u_ref: vec![0.0] };
        let cl = closed_loop(di.clone(), pd).unwrap();
        assert_eq!(cl.input_dim(), 0);
        cl.drift(&[1.0, 0.0], &mut f);
        assert_eq!(f, [0.0, -1.0]);

        assert!(matches!(
            closed_loop(di, Policy::Constant(vec![0.0, 0.0])),
            Err(DynamicsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lqr_policy_holds_equilibrium() {
        let p = QuadParams::default();
        let d: Arc<dyn ControlAffine> = Arc::new(Quad4d::new(p));
        let x_eq = vec![1.5, 0.0, 0.0, 0.0];
        let u_eq = vec![p.mass * p.gravity, 0.0];
        let (a, b) = linearize(&*d, &x_eq, &u_eq);
        let q = nalgebra::DMatrix::identity(4, 4);
        let r = nalgebra::DMatrix::identity(2, 2);
        let lqr = solve_lqr(&a, &b, &q, &r).unwrap();
        let cl = closed_loop(d, lqr.policy(x_eq.clone(), u_eq)).unwrap();
        let mut f = [1.0; 4];
        cl.drift(&x_eq, &mut f);
        for v in f {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tabulated_policy_interpolates() {
        let g = Arc::new(Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![5, 5]).unwrap());
        let table = ScalarField::from_fn(g, |x| -x[0] - x[1]);
        let di: Arc<dyn ControlAffine> = Arc::new(DoubleIntegrator::new(1.0));
        let cl = closed_loop(di, Policy::Tabulated(vec![table])).unwrap();
        let mut f = [0.0; 2];
        cl.drift(&[0.25, 0.5], &mut f);
        assert_abs_diff_eq!(f[1], -0.75, epsilon = 1e-12);
        // Output is clipped to the input box.
        cl.drift(&[1.0, 1.0], &mut f);
        assert_eq!(f[1], -1.0);
    }

    #[test]
    fn constraint_margin() {
        let c = BoxConstraint::new(vec![AxisBound { axis: 0, lo: -1.0, hi: 1.0 }]);
        assert_eq!(c.margin(&[0.25, 9.0]), 0.75);
        assert_eq!(c.margin(&[-1.5, 0.0]), -0.5);
        assert!(c.contains(&[1.0, 3.0]));
        assert!(!c.contains(&[1.0 + 1e-12, 3.0]));
    }

    #[test]
    fn audit_catches_non_finite() {
        let g = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![5, 5]).unwrap();
        assert!(audit_finite(&DoubleIntegrator::new(1.0), &g).is_ok());
        let bad = LinearSystem::new(
            vec![vec![f64::NAN, 0.0], vec![0.0, 0.0]],
            vec![vec![0.0], vec![1.0]],
            vec![-1.0],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(audit_finite(&bad, &g), Err(DynamicsError::NonFinite { .. })));
    }

    fn random_system(rng: &mut ChaCha8Rng) -> LinearSystem {
        let n = 3;
        let m = 2;
        let a = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let b = (0..n).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        LinearSystem::new(a, b, vec![-1.0, 0.0], vec![0.5, 3.0]).unwrap()
    }

    proptest! {
        #[test]
        fn bang_bang_dominates_sampled_inputs(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_system(&mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u_star = optimal_control(&d, &x, &q);
            for (j, u) in u_star.iter().enumerate() {
                prop_assert!(*u == d.input_lo()[j] || *u == d.input_hi()[j]);
            }
            let dot = |f: Vec<f64>| f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            let best = dot(flow(&d, &x, &u_star).unwrap());
            for _ in 0..100 {
                let u: Vec<f64> = (0..2).map(|j| rng.gen_range(d.input_lo()[j]..=d.input_hi()[j])).collect();
                prop_assert!(best >= dot(flow(&d, &x, &u).unwrap()) - 1e-12);
            }
        }

        #[test]
        fn closed_loop_matches_substituted_flow(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Arc::new(random_system(&mut rng));
            let gain = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let policy = Policy::Linear { gain, x_ref: vec![0.1, 0.0, -0.2], u_ref: vec![0.0, 1.0] };
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u = policy.evaluate(&x, d.input_lo(), d.input_hi());
            let cl = closed_loop(d.clone(), policy).unwrap();
            let mut f = vec![0.0; 3];
            cl.drift(&x, &mut f);
            prop_assert_eq!(f, flow(&*d, &x, &u).unwrap());
        }
    }
}
