//! Minimal-modification safety filter: the control closest to a nominal one
//! (in a weighted norm) that keeps `dh/dt + gamma h >= 0` for a gridded `h`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{optimal_control, ControlAffine};
use crate::grid::{GridError, ScalarField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Slope of the linear class-K term `alpha(h) = gamma h`.
    pub gamma: f64,
    /// Diagonal of the input weight. Empty means identity.
    pub r_diag: Vec<f64>,
    /// Weight of a nonnegative slack on the barrier constraint. `None` keeps
    /// the constraint hard.
    pub relaxation: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { gamma: 1.0, r_diag: Vec::new(), relaxation: None }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("filter gamma must be positive, got {0}")]
    Gamma(f64),
    #[error("input weight entry {index} must be positive, got {value}")]
    Weight { index: usize, value: f64 },
    #[error("input weight has {found} entries for {expected} inputs")]
    WeightLength { expected: usize, found: usize },
    #[error("relaxation weight must be positive, got {0}")]
    Relaxation(f64),
    #[error("nominal control has {found} entries for {expected} inputs")]
    ControlLength { expected: usize, found: usize },
    #[error("nominal control is not finite: {0:?}")]
    NonFiniteNominal(Vec<f64>),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl FilterConfig {
    pub fn validate(&self, input_dim: usize) -> Result<(), FilterError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(FilterError::Gamma(self.gamma));
        }
        if !self.r_diag.is_empty() && self.r_diag.len() != input_dim {
            return Err(FilterError::WeightLength { expected: input_dim, found: self.r_diag.len() });
        }
        if let Some((index, &value)) = self.r_diag.iter().enumerate().find(|(_, r)| !(**r > 0.0 && r.is_finite())) {
            return Err(FilterError::Weight { index, value });
        }
        if let Some(rho) = self.relaxation {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(FilterError::Relaxation(rho));
            }
        }
        Ok(())
    }

    fn weight(&self, j: usize) -> f64 {
        self.r_diag.get(j).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStatus {
    /// The clipped nominal control already satisfies the constraint.
    NominalFeasible,
    Modified,
    /// No admissible input satisfies the constraint; the output is the box
    /// vertex maximizing `a^T u`.
    InfeasibleClamped,
}

/// Box-constrained QP `min (u - u_nom)^T R (u - u_nom)` subject to
/// `a^T u + s >= b`, where the slack `s` is pinned to zero unless relaxation
/// is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfQp<'a> {
    pub a: &'a [f64],
    pub b: f64,
    pub lo: &'a [f64],
    pub hi: &'a [f64],
    pub u_nom: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub status: FilterStatus,
    /// Slack used when relaxation is enabled, otherwise zero.
    pub slack: f64,
}

impl CbfQp<'_> {
    pub fn objective(&self, u: &[f64], cfg: &FilterConfig) -> f64 {
        u.iter().zip(self.u_nom).enumerate().map(|(j, (u, n))| cfg.weight(j) * (u - n) * (u - n)).sum()
    }

    pub fn residual(&self, u: &[f64]) -> f64 {
        dot(self.a, u) - self.b
    }

    /// Exact minimizer by enumerating the faces of the feasible polytope: on
    /// each face the minimizer over its affine hull has a closed form, and
    /// the best feasible one is the global optimum of the convex problem.
    pub fn solve(&self, cfg: &FilterConfig) -> QpSolution {
        let m = self.u_nom.len();
        let clipped: Vec<f64> = (0..m).map(|j| self.u_nom[j].clamp(self.lo[j], self.hi[j])).collect();
        if self.residual(&clipped) >= 0.0 {
            return QpSolution { u: clipped, status: FilterStatus::NominalFeasible, slack: 0.0 };
        }
        // Variables are the inputs followed by the optional slack.
        let mut vars: Vec<Var> = (0..m)
            .map(|j| Var { lo: self.lo[j], hi: self.hi[j], nom: self.u_nom[j], w: cfg.weight(j), a: self.a[j] })
            .collect();
        if let Some(rho) = cfg.relaxation {
            vars.push(Var { lo: 0.0, hi: f64::INFINITY, nom: 0.0, w: rho, a: 1.0 });
        } else {
            let best: f64 = (0..m).map(|j| if self.a[j] >= 0.0 { self.a[j] * self.hi[j] } else { self.a[j] * self.lo[j] }).sum();
            if best < self.b {
                let u = (0..m).map(|j| if self.a[j] >= 0.0 { self.hi[j] } else { self.lo[j] }).collect();
                return QpSolution { u, status: FilterStatus::InfeasibleClamped, slack: 0.0 };
            }
        }
        let scale: f64 = vars.iter().map(|v| (v.a * v.lo).abs().max((v.a * v.hi).abs())).filter(|s| s.is_finite()).sum();
        let feas_tol = 1e-12 * (1.0 + self.b.abs() + scale);
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut cand = vec![0.0; vars.len()];
        let faces = 3usize.pow(vars.len() as u32);
        for code in 0..faces {
            // Per variable: 0 free, 1 at lower bound, 2 at upper bound.
            let mut c = code;
            let mut valid = true;
            let mut free = Vec::with_capacity(vars.len());
            for (k, v) in vars.iter().enumerate() {
                match c % 3 {
                    0 => {
                        free.push(k);
                        cand[k] = v.nom;
                    }
                    1 => cand[k] = v.lo,
                    _ => {
                        valid &= v.hi.is_finite();
                        cand[k] = v.hi;
                    }
                }
                c /= 3;
            }
            if !valid {
                continue;
            }
            // Constraint inactive on this face.
            consider(&vars, &cand, feas_tol, self.b, &mut best);
            // Constraint active: move the free variables along R^{-1} a.
            let curvature: f64 = free.iter().map(|&k| vars[k].a * vars[k].a / vars[k].w).sum();
            if curvature > 0.0 {
                let lambda = (self.b - vars.iter().zip(&cand).map(|(v, x)| v.a * x).sum::<f64>()) / curvature;
                for &k in &free {
                    cand[k] = vars[k].nom + lambda * vars[k].a / vars[k].w;
                }
                consider(&vars, &cand, feas_tol, self.b, &mut best);
            }
        }
        let (_, x) = best.expect("a feasible face exists once the box can satisfy the constraint");
        let slack = if cfg.relaxation.is_some() { x[m] } else { 0.0 };
        QpSolution { u: x[..m].to_vec(), status: FilterStatus::Modified, slack }
    }
}

struct Var {
    lo: f64,
    hi: f64,
    nom: f64,
    w: f64,
    a: f64,
}

fn consider(vars: &[Var], x: &[f64], tol: f64, b: f64, best: &mut Option<(f64, Vec<f64>)>) {
    let in_box = vars.iter().zip(x).all(|(v, &x)| x >= v.lo - tol && x <= v.hi + tol);
    let lhs: f64 = vars.iter().zip(x).map(|(v, x)| v.a * x).sum();
    if !in_box || lhs < b - tol {
        return;
    }
    let obj: f64 = vars.iter().zip(x).map(|(v, x)| v.w * (x - v.nom) * (x - v.nom)).sum();
    if best.as_ref().map_or(true, |(o, _)| obj < *o) {
        // Snap round-off back into the box so callers see admissible inputs.
        let snapped = vars.iter().zip(x).map(|(v, &x)| x.clamp(v.lo, v.hi)).collect();
        *best = Some((obj, snapped));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u: Vec<f64>,
    pub status: FilterStatus,
    pub slack: f64,
    /// Interpolated barrier value at the (clamped) query.
    pub h: f64,
    /// The query left the grid box and was clamped before interpolation.
    pub off_grid: bool,
}

/// Filters `u_nom` at state `x` against the barrier `v`. States outside the
/// grid box are clamped onto it, which is reported in `off_grid`.
pub fn filter_control(
    v: &ScalarField,
    d: &dyn ControlAffine,
    x: &[f64],
    u_nom: &[f64],
    cfg: &FilterConfig,
) -> Result<FilterOutput, FilterError> {
    let n = d.state_dim();
    let m = d.input_dim();
    cfg.validate(m)?;
    if u_nom.len() != m {
        return Err(FilterError::ControlLength { expected: m, found: u_nom.len() });
    }
    if u_nom.iter().any(|u| !u.is_finite()) {
        return Err(FilterError::NonFiniteNominal(u_nom.to_vec()));
    }
    let (h, off_grid) = v.interpolate_clamped(x)?;
    let (grad, _) = v.interpolate_gradient_clamped(x)?;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    d.drift(x, &mut f);
    d.input_matrix(x, &mut g);
    let a: Vec<f64> = (0..m).map(|j| (0..n).map(|i| g[i * m + j] * grad[i]).sum()).collect();
    let b = -cfg.gamma * h - dot(&grad, &f);
    let qp = CbfQp { a: &a, b, lo: d.input_lo(), hi: d.input_hi(), u_nom };
    let mut sol = qp.solve(cfg);
    if sol.status == FilterStatus::InfeasibleClamped {
        // Same vertex as the solver's own maximizer, with its tie-breaking.
        sol.u = optimal_control(d, x, &grad);
    }
    Ok(FilterOutput { u: sol.u, status: sol.status, slack: sol.slack, h, off_grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DoubleIntegrator;
    use crate::grid::Grid;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn qp<'a>(a: &'a [f64], b: f64, lo: &'a [f64], hi: &'a [f64], u_nom: &'a [f64]) -> CbfQp<'a> {
        CbfQp { a, b, lo, hi, u_nom }
    }

    #[test]
    fn nominal_kept_when_feasible() {
        let s = qp(&[1.0], -0.5, &[-1.0], &[1.0], &[0.2]).solve(&FilterConfig::default());
        assert_eq!(s.status, FilterStatus::NominalFeasible);
        assert_eq!(s.u, vec![0.2]);
        // Out-of-box nominal comes back clipped.
        let s = qp(&[1.0], -0.5, &[-1.0], &[1.0], &[3.0]).solve(&FilterConfig::default());
        assert_eq!(s.u, vec![1.0]);
    }

    #[test]
    fn halfspace_projection_in_one_dimension() {
        let s = qp(&[1.0], 0.5, &[-1.0], &[1.0], &[0.0]).solve(&FilterConfig::default());
        assert_eq!(s.status, FilterStatus::Modified);
        assert_abs_diff_eq!(s.u[0], 0.5, epsilon = 1e-12);
        // Fine grid oracle.
        let best = (0..=20000)
            .map(|k| -1.0 + k as f64 * 1e-4)
            .filter(|u| *u >= 0.5)
            .map(|u| u * u)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(best, 0.25, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_returns_maximizing_vertex() {
        let s = qp(&[1.0, -2.0], 5.0, &[-1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).solve(&FilterConfig::default());
        assert_eq!(s.status, FilterStatus::InfeasibleClamped);
        assert_eq!(s.u, vec![1.0, -1.0]);
    }

    #[test]
    fn relaxation_trades_slack_for_effort() {
        let cfg = FilterConfig { relaxation: Some(1.0), ..FilterConfig::default() };
        // Infeasible hard constraint: u <= 1 but need u >= 2.
        let s = qp(&[1.0], 2.0, &[-1.0], &[1.0], &[0.0]).solve(&cfg);
        assert_eq!(s.status, FilterStatus::Modified);
        assert_abs_diff_eq!(s.u[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.slack, 1.0, epsilon = 1e-12);
        // Interior optimum: min u^2 + s^2 with u + s >= 1 splits evenly.
        let s = qp(&[1.0], 1.0, &[-2.0], &[2.0], &[0.0]).solve(&cfg);
        assert_abs_diff_eq!(s.u[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.slack, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weights_shift_effort_to_cheap_inputs() {
        let cfg = FilterConfig { r_diag: vec![1.0, 4.0], ..FilterConfig::default() };
        let s = qp(&[1.0, 1.0], 1.0, &[-5.0, -5.0], &[5.0, 5.0], &[0.0, 0.0]).solve(&cfg);
        // u = lambda R^{-1} a with u1 + u2 = 1.
        assert_abs_diff_eq!(s.u[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s.u[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert_eq!(FilterConfig { gamma: 0.0, ..FilterConfig::default() }.validate(1), Err(FilterError::Gamma(0.0)));
        assert!(FilterConfig { r_diag: vec![1.0, -1.0], ..FilterConfig::default() }.validate(2).is_err());
        assert!(FilterConfig { r_diag: vec![1.0], ..FilterConfig::default() }.validate(2).is_err());
        assert!(FilterConfig { relaxation: Some(0.0), ..FilterConfig::default() }.validate(1).is_err());
    }

    /// Brute force over a grid of admissible inputs; returns the best objective.
    fn brute_force(q: &CbfQp, cfg: &FilterConfig, step: f64) -> f64 {
        let m = q.u_nom.len();
        let counts: Vec<usize> = (0..m).map(|j| ((q.hi[j] - q.lo[j]) / step).round() as usize + 1).collect();
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; m];
        let mut u = vec![0.0; m];
        loop {
            for j in 0..m {
                u[j] = (q.lo[j] + idx[j] as f64 * step).min(q.hi[j]);
            }
            if q.residual(&u) >= 0.0 {
                best = best.min(q.objective(&u, cfg));
            }
            let mut j = 0;
            loop {
                if j == m {
                    return best;
                }
                idx[j] += 1;
                if idx[j] < counts[j] {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = rng.gen_range(1..=2);
            let lo: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..0.0)).collect();
            let hi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
            let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u_nom: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b = rng.gen_range(-2.0..2.0);
            let cfg = FilterConfig { r_diag: (0..m).map(|_| rng.gen_range(0.5..2.0)).collect(), ..FilterConfig::default() };
            let q = qp(&a, b, &lo, &hi, &u_nom);
            let s = q.solve(&cfg);
            if s.status == FilterStatus::InfeasibleClamped {
                assert!(brute_force(&q, &cfg, 1e-2).is_infinite());
                continue;
            }
            assert!(q.residual(&s.u) >= -1e-9);
            assert!(s.u.iter().zip(&lo).zip(&hi).all(|((u, l), h)| u >= l && u <= h));
            let brute = brute_force(&q, &cfg, 1e-2);
            // Grid points are feasible, so the exact answer can only be better.
            assert!(q.objective(&s.u, &cfg) <= brute + 1e-9, "{s:?} vs {brute}");
        }
    }

    fn di_field() -> ScalarField {
        let g = Arc::new(Grid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![41, 41]).unwrap());
        // Affine barrier h = 1 - x: safe to the left of x = 1.
        ScalarField::from_fn(g, |x| 1.0 - x[0])
    }

    #[test]
    fn degenerate_gradient_keeps_nominal() {
        let g = Arc::new(Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![5, 5]).unwrap());
        let v = ScalarField::constant(g, 0.3);
        let out = filter_control(&v, &DoubleIntegrator::new(1.0), &[0.0, 0.0], &[2.0], &FilterConfig::default()).unwrap();
        assert_eq!(out.status, FilterStatus::NominalFeasible);
        assert_eq!(out.u, vec![1.0]);
    }

    #[test]
    fn gridded_filter_builds_the_constraint() {
        // h = 1 - x - 0.5 v gives h' = -v - 0.5 u.
        let g = Arc::new(Grid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![41, 41]).unwrap());
        let v = ScalarField::from_fn(g, |x| 1.0 - x[0] - 0.5 * x[1]);
        let x = [0.5, 0.2];
        let h = 1.0 - 0.5 - 0.1;
        // -v - 0.5 u + h >= 0  <=>  u <= 2 (h - v).
        let bound = 2.0 * (h - x[1]);
        let out = filter_control(&v, &DoubleIntegrator::new(1.0), &x, &[1.0], &FilterConfig::default()).unwrap();
        assert_eq!(out.status, FilterStatus::Modified);
        assert_abs_diff_eq!(out.u[0], bound, epsilon = 1e-9);
        assert_abs_diff_eq!(out.h, h, epsilon = 1e-12);
        assert!(!out.off_grid);
    }

    #[test]
    fn off_grid_queries_are_flagged() {
        let v = di_field();
        let out = filter_control(&v, &DoubleIntegrator::new(1.0), &[3.0, 0.0], &[0.0], &FilterConfig::default()).unwrap();
        assert!(out.off_grid);
    }

    #[test]
    fn infeasible_state_brakes_fully() {
        let g = Arc::new(Grid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![41, 41]).unwrap());
        let v = ScalarField::from_fn(g, |x| 1.0 - x[0] - 0.5 * x[1]);
        // Deep outside with high speed toward the wall: no input can fix it.
        let out = filter_control(&v, &DoubleIntegrator::new(1.0), &[1.5, 1.9], &[1.0], &FilterConfig::default()).unwrap();
        assert_eq!(out.status, FilterStatus::InfeasibleClamped);
        assert_eq!(out.u, vec![-1.0]);
    }
}
