//! Closed-loop simulation under the safety filter and the safety metrics
//! computed over batches of trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BoxConstraint, ControlAffine, Policy};
use crate::filter::{filter_control, FilterConfig, FilterError, FilterStatus};
use crate::grid::ScalarField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Seconds.
    pub horizon: f64,
    /// Zero-order-hold period and integration step, seconds.
    pub dt: f64,
    /// Run the nominal policy through the safety filter.
    pub filtered: bool,
    /// A state farther than this outside the grid box ends the trajectory.
    pub divergence_margin: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { horizon: 10.0, dt: 0.01, filtered: true, divergence_margin: 1.0 }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(RolloutError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(RolloutError::InvalidConfig(format!("horizon must be nonnegative, got {}", self.horizon)));
        }
        if !(self.divergence_margin >= 0.0) {
            return Err(RolloutError::InvalidConfig(format!(
                "divergence margin must be nonnegative, got {}",
                self.divergence_margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("invalid rollout configuration: {0}")]
    InvalidConfig(String),
    #[error("initial state {state:?} is outside the grid")]
    StartOutsideGrid { state: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty trajectory batch")]
    EmptyBatch,
    #[error("found {found} of {requested} safe starts after {attempts} attempts")]
    EmptySafeSet { requested: usize, found: usize, attempts: usize },
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Samples at `times[k]`; `controls[k]` is held over the following step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub h_values: Vec<f64>,
    /// Membership in the true constraint set, not the value function.
    pub safe_flags: Vec<bool>,
    pub filter_active_flags: Vec<bool>,
    /// The barrier was evaluated at a clamped state.
    pub off_grid_flags: Vec<bool>,
    pub infeasible_flags: Vec<bool>,
    /// Truncated because the state ran away from the grid.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.safe_flags.iter().position(|s| !s)
    }
}

/// Everything a rollout needs besides its start state.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    pub field: &'a ScalarField,
    pub dynamics: &'a dyn ControlAffine,
    pub nominal: &'a Policy,
    pub constraint: &'a BoxConstraint,
    pub filter: &'a FilterConfig,
}

impl Simulator<'_> {
    fn check(&self) -> Result<(), RolloutError> {
        let n = self.dynamics.state_dim();
        if self.field.grid().ndim() != n {
            return Err(RolloutError::DimensionMismatch { expected: n, found: self.field.grid().ndim() });
        }
        if self.nominal.input_dim() != self.dynamics.input_dim() {
            return Err(RolloutError::DimensionMismatch {
                expected: self.dynamics.input_dim(),
                found: self.nominal.input_dim(),
            });
        }
        if let Some(b) = self.constraint.bounds.iter().find(|b| b.axis >= n) {
            return Err(RolloutError::DimensionMismatch { expected: n, found: b.axis + 1 });
        }
        self.filter.validate(self.dynamics.input_dim())?;
        Ok(())
    }

    /// Zero-order-hold simulation with classical RK4 steps.
    pub fn rollout(&self, x0: &[f64], cfg: &RolloutConfig) -> Result<Trajectory, RolloutError> {
        cfg.validate()?;
        self.check()?;
        let d = self.dynamics;
        let n = d.state_dim();
        if x0.len() != n {
            return Err(RolloutError::DimensionMismatch { expected: n, found: x0.len() });
        }
        let grid = self.field.grid();
        if !grid.contains_state(x0) {
            return Err(RolloutError::StartOutsideGrid { state: x0.to_vec() });
        }
        let steps = (cfg.horizon / cfg.dt).round() as usize;
        let mut t = Trajectory {
            times: Vec::with_capacity(steps + 1),
            states: Vec::with_capacity(steps + 1),
            controls: Vec::with_capacity(steps + 1),
            h_values: Vec::with_capacity(steps + 1),
            safe_flags: Vec::with_capacity(steps + 1),
            filter_active_flags: Vec::with_capacity(steps + 1),
            off_grid_flags: Vec::with_capacity(steps + 1),
            infeasible_flags: Vec::with_capacity(steps + 1),
            diverged: false,
        };
        let mut x = x0.to_vec();
        let mut rk = Rk4::new(n, d.input_dim());
        for k in 0..=steps {
            let u_nom = self.nominal.evaluate(&x, d.input_lo(), d.input_hi());
            let (u, h, off_grid, active, infeasible) = if cfg.filtered {
                let out = filter_control(self.field, d, &x, &u_nom, self.filter)?;
                let active = out.status != FilterStatus::NominalFeasible;
                (out.u, out.h, out.off_grid, active, out.status == FilterStatus::InfeasibleClamped)
            } else {
                let (h, off_grid) = self.field.interpolate_clamped(&x).map_err(FilterError::from)?;
                (u_nom, h, off_grid, false, false)
            };
            t.times.push(k as f64 * cfg.dt);
            t.safe_flags.push(self.constraint.contains(&x));
            t.h_values.push(h);
            t.off_grid_flags.push(off_grid);
            t.filter_active_flags.push(active);
            t.infeasible_flags.push(infeasible);
            t.states.push(x.clone());
            t.controls.push(u.clone());
            if k == steps {
                break;
            }
            rk.step(d, &mut x, &u, cfg.dt);
            if runaway(&x, grid.lo(), grid.hi(), cfg.divergence_margin) {
                t.diverged = true;
                break;
            }
        }
        Ok(t)
    }

    /// Rollouts from every start, in parallel; output order follows `starts`.
    pub fn batch(&self, starts: &[Vec<f64>], cfg: &RolloutConfig) -> Result<Vec<Trajectory>, RolloutError> {
        starts.par_iter().map(|x0| self.rollout(x0, cfg)).collect()
    }
}

fn runaway(x: &[f64], lo: &[f64], hi: &[f64], margin: f64) -> bool {
    x.iter().zip(lo).zip(hi).any(|((&x, &lo), &hi)| !x.is_finite() || x < lo - margin || x > hi + margin)
}

struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    g: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize, m: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n], g: vec![0.0; n * m] }
    }

    fn step(&mut self, d: &dyn ControlAffine, x: &mut [f64], u: &[f64], dt: f64) {
        let Rk4 { k, tmp, g } = self;
        d.flow_into(x, u, g, &mut k[0]);
        for (stage, scale) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
            for i in 0..x.len() {
                tmp[i] = x[i] + scale * dt * k[stage - 1][i];
            }
            let (_, rest) = k.split_at_mut(stage);
            d.flow_into(tmp, u, g, &mut rest[0]);
        }
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub rollouts: usize,
    pub samples: usize,
    /// Percent of all samples outside the constraint set.
    pub unsafe_state_share: f64,
    /// Percent of trajectories with at least one unsafe sample.
    pub unsafe_rollout_share: f64,
    /// Percent of samples where the filter changed the nominal control.
    pub filter_activity: f64,
    pub unsafe_rollouts: usize,
    /// Unsafe rollouts whose barrier was queried off the grid at or before
    /// their first violation.
    pub off_grid_unsafe_rollouts: usize,
    pub infeasible_samples: usize,
    pub diverged_rollouts: usize,
    /// Mean time from the first violation back into the constraint set, over
    /// the unsafe rollouts that come back.
    pub mean_recovery_time: Option<f64>,
    pub unrecovered_rollouts: usize,
}

pub fn evaluate_rollouts(batch: &[Trajectory]) -> Result<RolloutMetrics, RolloutError> {
    if batch.is_empty() {
        return Err(RolloutError::EmptyBatch);
    }
    let samples: usize = batch.iter().map(Trajectory::len).sum();
    let unsafe_samples: usize = batch.iter().map(|t| t.safe_flags.iter().filter(|s| !**s).count()).sum();
    let active: usize = batch.iter().map(|t| t.filter_active_flags.iter().filter(|a| **a).count()).sum();
    let mut unsafe_rollouts = 0;
    let mut off_grid_unsafe_rollouts = 0;
    let mut recovery = Vec::new();
    let mut unrecovered_rollouts = 0;
    for t in batch {
        let Some(first) = t.first_violation() else { continue };
        unsafe_rollouts += 1;
        if t.off_grid_flags[..=first].iter().any(|o| *o) {
            off_grid_unsafe_rollouts += 1;
        }
        match t.safe_flags[first..].iter().position(|s| *s) {
            Some(back) => recovery.push(t.times[first + back] - t.times[first]),
            None => unrecovered_rollouts += 1,
        }
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(RolloutMetrics {
        rollouts: batch.len(),
        samples,
        unsafe_state_share: pct(unsafe_samples, samples),
        unsafe_rollout_share: pct(unsafe_rollouts, batch.len()),
        filter_activity: pct(active, samples),
        unsafe_rollouts,
        off_grid_unsafe_rollouts,
        infeasible_samples: batch.iter().map(|t| t.infeasible_flags.iter().filter(|f| **f).count()).sum(),
        diverged_rollouts: batch.iter().filter(|t| t.diverged).count(),
        mean_recovery_time: (!recovery.is_empty()).then(|| recovery.iter().sum::<f64>() / recovery.len() as f64),
        unrecovered_rollouts,
    })
}

/// Uniform rejection sampling over the grid box, keeping states whose
/// interpolated value is at least `margin`.
pub fn sample_safe_starts(
    v: &ScalarField,
    count: usize,
    margin: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<Vec<Vec<f64>>, RolloutError> {
    let grid = v.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == max_attempts {
            return Err(RolloutError::EmptySafeSet { requested: count, found: out.len(), attempts });
        }
        attempts += 1;
        let x: Vec<f64> = grid.lo().iter().zip(grid.hi()).map(|(&lo, &hi)| rng.gen_range(lo..=hi)).collect();
        if v.interpolate(&x).map_err(FilterError::from)? >= margin {
            out.push(x);
        }
    }
    Ok(out)
}
