//! Upwind differences, the Lax-Friedrichs numerical Hamiltonian and the CFL
//! step rule. Both solvers call into [`Kernel`] for every cell they update.
//!
//! The value function evolves as `V' = V + dt * min(0, H_LF)` where
//!
//! ```text
//! H_LF = H(x, (p- + p+)/2) + sum_i alpha_i (p+_i - p-_i) / 2
//! H(x, q) = max_u <q, drift(x) + G(x) u>
//! ```
//!
//! With `alpha_i >= |dH/dq_i|` and `dt * sum_i alpha_i / dx_i <= 1` the update
//! is monotone in every stencil value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ControlAffine;
use crate::grid::{Grid, GridError, ScalarField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("stencil order must be 1 or 2, got {0}")]
    StencilOrder(usize),
    #[error("cfl factor must lie in (0, 1], got {0}")]
    CflFactor(f64),
    #[error("maximum step must be positive, got {0}")]
    MaxStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DissipationMode {
    /// One bound on `|dx_i/dt|` over the whole grid and every admissible input.
    GlobalBound,
    /// Bound per cell, over admissible inputs only.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    pub stencil_order: usize,
    pub cfl_factor: f64,
    pub dissipation: DissipationMode,
    /// Step used when every dissipation coefficient vanishes; also an upper cap.
    pub max_step: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self { stencil_order: 1, cfl_factor: 0.8, dissipation: DissipationMode::GlobalBound, max_step: 1.0 }
    }
}

impl NumericsConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !matches!(self.stencil_order, 1 | 2) {
            return Err(ConfigError::StencilOrder(self.stencil_order));
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 1.0) {
            return Err(ConfigError::CflFactor(self.cfl_factor));
        }
        if !(self.max_step > 0.0) {
            return Err(ConfigError::MaxStep(self.max_step));
        }
        Ok(())
    }
}

/// Source of the Lax-Friedrichs coefficients for one evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Dissipation<'a> {
    GlobalBound(&'a [f64]),
    Local,
}

/// One-sided differences of order `order` along every axis at `index`.
/// A side that falls off the grid copies the other side, which is the same as
/// extrapolating the field linearly past the face.
pub fn upwind_gradients(
    field: &ScalarField,
    index: &[usize],
    cfg: &NumericsConfig,
) -> Result<(Vec<f64>, Vec<f64>), GridError> {
    let grid = field.grid();
    let flat = grid.flat_index(index)?;
    let n = grid.ndim();
    let mut gm = vec![0.0; n];
    let mut gp = vec![0.0; n];
    one_sided_differences(field.values(), grid, flat, index, cfg.stencil_order, &mut gm, &mut gp);
    Ok((gm, gp))
}

pub(crate) fn one_sided_differences(
    values: &[f64],
    grid: &Grid,
    flat: usize,
    index: &[usize],
    order: usize,
    gm: &mut [f64],
    gp: &mut [f64],
) {
    let shape = grid.shape();
    let strides = grid.strides();
    let spacing = grid.spacing();
    let v0 = values[flat];
    for d in 0..index.len() {
        let s = strides[d];
        let h = spacing[d];
        let i = index[d];
        let has_minus = i >= 1;
        let has_plus = i + 1 < shape[d];
        if has_minus {
            gm[d] = if order >= 2 && i >= 2 {
                (3.0 * v0 - 4.0 * values[flat - s] + values[flat - 2 * s]) / (2.0 * h)
            } else {
                (v0 - values[flat - s]) / h
            };
        }
        if has_plus {
            gp[d] = if order >= 2 && i + 2 < shape[d] {
                (-3.0 * v0 + 4.0 * values[flat + s] - values[flat + 2 * s]) / (2.0 * h)
            } else {
                (values[flat + s] - v0) / h
            };
        }
        if !has_minus {
            gm[d] = gp[d];
        }
        if !has_plus {
            gp[d] = gm[d];
        }
    }
}

/// `H(x, q) = <q, drift> + sum_j max over [lo_j, hi_j] of (G^T q)_j u_j`.
fn hamiltonian(q: &[f64], drift: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let m = lo.len();
    let mut h: f64 = q.iter().zip(drift).map(|(a, b)| a * b).sum();
    for j in 0..m {
        let sigma: f64 = q.iter().enumerate().map(|(i, qi)| qi * g[i * m + j]).sum();
        h += if sigma >= 0.0 { sigma * hi[j] } else { sigma * lo[j] };
    }
    h
}

/// `max_u |drift_i + (G u)_i|` over the input box, per axis.
fn local_alphas(drift: &[f64], g: &[f64], lo: &[f64], hi: &[f64], out: &mut [f64]) {
    let m = lo.len();
    for (i, out) in out.iter_mut().enumerate() {
        let mut center = drift[i];
        let mut spread = 0.0;
        for j in 0..m {
            let gij = g[i * m + j];
            center += gij * 0.5 * (lo[j] + hi[j]);
            spread += gij.abs() * 0.5 * (hi[j] - lo[j]);
        }
        *out = center.abs() + spread;
    }
}

/// Lax-Friedrichs Hamiltonian at `x` and the coefficients it used.
pub fn numerical_hamiltonian(
    d: &dyn ControlAffine,
    x: &[f64],
    grad_minus: &[f64],
    grad_plus: &[f64],
    dissipation: Dissipation<'_>,
) -> (f64, Vec<f64>) {
    let n = d.state_dim();
    let m = d.input_dim();
    let mut drift = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    let mut q = vec![0.0; n];
    let mut alphas = vec![0.0; n];
    d.drift(x, &mut drift);
    d.input_matrix(x, &mut g);
    let h = lax_friedrichs(
        d, &drift, &g, grad_minus, grad_plus, dissipation, &mut q, &mut alphas,
    );
    (h, alphas)
}

#[allow(clippy::too_many_arguments)]
fn lax_friedrichs(
    d: &dyn ControlAffine,
    drift: &[f64],
    g: &[f64],
    gm: &[f64],
    gp: &[f64],
    dissipation: Dissipation<'_>,
    q: &mut [f64],
    alphas: &mut [f64],
) -> f64 {
    for i in 0..q.len() {
        q[i] = 0.5 * (gm[i] + gp[i]);
    }
    match dissipation {
        Dissipation::GlobalBound(bound) => alphas.copy_from_slice(bound),
        Dissipation::Local => local_alphas(drift, g, d.input_lo(), d.input_hi(), alphas),
    }
    let diss: f64 = (0..q.len()).map(|i| alphas[i] * 0.5 * (gp[i] - gm[i])).sum();
    hamiltonian(q, drift, g, d.input_lo(), d.input_hi()) + diss
}

/// Global dissipation bound: the largest local coefficient over all cells.
pub fn dissipation_bound(d: &dyn ControlAffine, grid: &Grid) -> Vec<f64> {
    let n = grid.ndim();
    let m = d.input_dim();
    let mut index = vec![0usize; n];
    let mut x = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    let mut local = vec![0.0; n];
    let mut bound = vec![0.0f64; n];
    loop {
        grid.state_into(&index, &mut x);
        d.drift(&x, &mut drift);
        d.input_matrix(&x, &mut g);
        local_alphas(&drift, &g, d.input_lo(), d.input_hi(), &mut local);
        for (b, l) in bound.iter_mut().zip(&local) {
            *b = b.max(*l);
        }
        if !grid.advance(&mut index) {
            return bound;
        }
    }
}

/// `dt = cfl / sum_i (alpha_i / dx_i)`, capped at `max_step`.
pub fn cfl_timestep(alphas: &[f64], grid: &Grid, cfg: &NumericsConfig) -> f64 {
    let rate: f64 = alphas.iter().zip(grid.spacing()).map(|(a, h)| a / h).sum();
    if rate > 0.0 {
        (cfg.cfl_factor / rate).min(cfg.max_step)
    } else {
        cfg.max_step
    }
}

/// Per-cell evaluator shared by the solvers and the diagnostics.
pub(crate) struct Kernel<'a> {
    pub dynamics: &'a dyn ControlAffine,
    pub grid: &'a Grid,
    pub order: usize,
    /// Grid-wide coefficient bound; sets the step in both modes.
    pub bound: Vec<f64>,
    pub local: bool,
}

pub(crate) struct Scratch {
    pub index: Vec<usize>,
    x: Vec<f64>,
    gm: Vec<f64>,
    gp: Vec<f64>,
    q: Vec<f64>,
    drift: Vec<f64>,
    g: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl<'a> Kernel<'a> {
    pub fn new(dynamics: &'a dyn ControlAffine, grid: &'a Grid, cfg: &NumericsConfig) -> Self {
        Self {
            dynamics,
            grid,
            order: cfg.stencil_order,
            bound: dissipation_bound(dynamics, grid),
            local: cfg.dissipation == DissipationMode::Local,
        }
    }

    pub fn scratch(&self) -> Scratch {
        let n = self.grid.ndim();
        let m = self.dynamics.input_dim();
        Scratch {
            index: vec![0; n],
            x: vec![0.0; n],
            gm: vec![0.0; n],
            gp: vec![0.0; n],
            q: vec![0.0; n],
            drift: vec![0.0; n],
            g: vec![0.0; n * m],
            alphas: vec![0.0; n],
        }
    }

    /// Numerical Hamiltonian at `flat`; `s.index` must already hold its
    /// multi-index. Leaves the coefficients used in `s.alphas`.
    pub fn eval(&self, values: &[f64], flat: usize, s: &mut Scratch) -> f64 {
        one_sided_differences(values, self.grid, flat, &s.index, self.order, &mut s.gm, &mut s.gp);
        self.grid.state_into(&s.index, &mut s.x);
        self.dynamics.drift(&s.x, &mut s.drift);
        self.dynamics.input_matrix(&s.x, &mut s.g);
        let dissipation = if self.local { Dissipation::Local } else { Dissipation::GlobalBound(&self.bound) };
        lax_friedrichs(self.dynamics, &s.drift, &s.g, &s.gm, &s.gp, dissipation, &mut s.q, &mut s.alphas)
    }

    /// Step shared by every sweep on this grid, whichever cells it updates,
    /// so a per-sweep decrease means the same thing to both solvers and the
    /// diagnostics.
    pub fn step(&self, cfg: &NumericsConfig) -> f64 {
        cfl_timestep(&self.bound, self.grid, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{closed_loop, optimal_control, DoubleIntegrator, LinearSystem, Policy};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid1(values: Vec<f64>) -> ScalarField {
        let n = values.len();
        let g = Arc::new(Grid::new(vec![0.0], vec![(n - 1) as f64], vec![n]).unwrap());
        ScalarField::new(g, values).unwrap()
    }

    #[test]
    fn upwind_examples() {
        let cfg = NumericsConfig::default();
        let f = grid1(vec![0.0, 1.0, 2.0]);
        assert_eq!(upwind_gradients(&f, &[1], &cfg).unwrap(), (vec![1.0], vec![1.0]));
        let f = grid1(vec![0.0, 0.0, 1.0]);
        assert_eq!(upwind_gradients(&f, &[1], &cfg).unwrap(), (vec![0.0], vec![1.0]));
        // Faces copy the interior side.
        assert_eq!(upwind_gradients(&f, &[0], &cfg).unwrap(), (vec![0.0], vec![0.0]));
        assert_eq!(upwind_gradients(&f, &[2], &cfg).unwrap(), (vec![1.0], vec![1.0]));
        assert!(upwind_gradients(&f, &[3], &cfg).is_err());
    }

    #[test]
    fn upwind_brackets_derivative_of_square() {
        let g = Arc::new(Grid::new(vec![0.0], vec![1.0], vec![101]).unwrap());
        let f = ScalarField::from_fn(g.clone(), |x| x[0] * x[0]);
        let h = g.spacing()[0];
        for order in [1, 2] {
            let cfg = NumericsConfig { stencil_order: order, ..Default::default() };
            for i in [10usize, 37, 90] {
                let x = i as f64 * h;
                let (gm, gp) = upwind_gradients(&f, &[i], &cfg).unwrap();
                if order == 1 {
                    assert!(gm[0] <= 2.0 * x && 2.0 * x <= gp[0]);
                    assert_abs_diff_eq!(gm[0], 2.0 * x, epsilon = 1.01 * h);
                    assert_abs_diff_eq!(gp[0], 2.0 * x, epsilon = 1.01 * h);
                } else {
                    // Second-order one-sided differences are exact on quadratics.
                    assert_abs_diff_eq!(gm[0], 2.0 * x, epsilon = 1e-9);
                    assert_abs_diff_eq!(gp[0], 2.0 * x, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let di = DoubleIntegrator::new(1.0);
        // Enumerate both vertices: <(1,0), (1, u)> = 1 for u = -1 and u = 1.
        let by_vertex = [-1.0, 1.0]
            .iter()
            .map(|u| 1.0 * 1.0 + 0.0 * u)
            .fold(f64::NEG_INFINITY, f64::max);
        let (h, alphas) = numerical_hamiltonian(&di, &[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0], Dissipation::Local);
        assert_eq!(h, by_vertex);
        assert_eq!(alphas, vec![1.0, 1.0]);

        let still = LinearSystem::new(vec![vec![0.0; 2]; 2], vec![vec![0.0]; 2], vec![-1.0], vec![1.0]).unwrap();
        let (h, alphas) = numerical_hamiltonian(&still, &[0.3, 0.2], &[1.0, -2.0], &[3.0, 0.5], Dissipation::Local);
        assert_eq!(h, 0.0);
        assert_eq!(alphas, vec![0.0, 0.0]);

        let cl = closed_loop(
            Arc::new(di),
            Policy::Linear { gain: vec![vec![0.5, 0.25]], x_ref: vec![0.0, 0.0], u_ref: vec![0.0] },
        )
        .unwrap();
        let grad = [0.7, -1.3];
        let x = [0.2, 0.4];
        let (h, _) = numerical_hamiltonian(&cl, &x, &grad, &grad, Dissipation::GlobalBound(&[3.0, 3.0]));
        let mut f = [0.0; 2];
        cl.drift(&x, &mut f);
        assert_abs_diff_eq!(h, grad[0] * f[0] + grad[1] * f[1], epsilon = 1e-12);
    }

    #[test]
    fn consistency_with_bang_bang_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = LinearSystem::new(
            vec![vec![0.1, 1.0, 0.0], vec![-0.5, 0.0, 2.0], vec![0.0, 0.3, -1.0]],
            vec![vec![1.0, 0.0], vec![0.5, -2.0], vec![0.0, 1.0]],
            vec![-1.0, -0.5],
            vec![2.0, 0.5],
        )
        .unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (h, _) = numerical_hamiltonian(&d, &x, &q, &q, Dissipation::Local);
            let u = optimal_control(&d, &x, &q);
            let f = crate::dynamics::flow(&d, &x, &u).unwrap();
            let analytic: f64 = f.iter().zip(&q).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(h, analytic, epsilon = 1e-12);
            let mut sampled = f64::NEG_INFINITY;
            for _ in 0..1000 {
                let u = [rng.gen_range(-1.0..=2.0), rng.gen_range(-0.5..=0.5)];
                let f = crate::dynamics::flow(&d, &x, &u).unwrap();
                sampled = sampled.max(f.iter().zip(&q).map(|(a, b)| a * b).sum());
            }
            assert!(sampled <= h + 1e-9);
        }
    }

    #[test]
    fn cfl_examples() {
        let cfg = NumericsConfig::default();
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![11, 11]).unwrap();
        assert_abs_diff_eq!(cfl_timestep(&[1.0, 1.0], &g, &cfg), 0.04, epsilon = 1e-15);
        assert_eq!(cfl_timestep(&[0.0, 0.0], &g, &cfg), 1.0);
        let coarse = Grid::new(vec![0.0, 0.0], vec![2.0, 2.0], vec![11, 11]).unwrap();
        assert_abs_diff_eq!(cfl_timestep(&[1.0, 1.0], &coarse, &cfg), 0.08, epsilon = 1e-15);
    }

    #[test]
    fn global_bound_covers_local() {
        let g = Grid::new(vec![-1.0, -2.0], vec![1.0, 2.0], vec![9, 9]).unwrap();
        let di = DoubleIntegrator::new(1.5);
        assert_eq!(dissipation_bound(&di, &g), vec![2.0, 1.5]);
    }

    #[test]
    fn config_validation() {
        assert!(NumericsConfig::default().validate().is_ok());
        let bad = NumericsConfig { stencil_order: 3, ..Default::default() };
        assert_eq!(bad.validate(), Err(ConfigError::StencilOrder(3)));
        let bad = NumericsConfig { cfl_factor: 1.2, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
