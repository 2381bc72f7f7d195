//! Local patching of an almost-barrier: dynamic programming restricted to an
//! active set of cells near the zero level, grown by stencil padding and
//! trimmed to a band `|V| <= zeta`. An empty active set certifies the boundary.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_dims, evaluate_cells, validate, ConvergenceConfig, SolveError, SolveStats};
use crate::dynamics::ControlAffine;
use crate::grid::{CellMask, Grid, GridError, ScalarField};
use crate::numerics::{Kernel, NumericsConfig};

/// Cells scheduled for update, kept sorted by flat index with an O(1)
/// membership mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    members: Vec<usize>,
    mask: Vec<bool>,
    generation: usize,
}

impl ActiveSet {
    pub fn empty(cells: usize) -> Self {
        Self { members: Vec::new(), mask: vec![false; cells], generation: 0 }
    }

    /// Builds a set from arbitrary flat indices; duplicates are dropped.
    pub fn from_cells(cells: usize, members: impl IntoIterator<Item = usize>) -> Result<Self, GridError> {
        let mut set = Self::empty(cells);
        for flat in members {
            if flat >= cells {
                return Err(GridError::IndexOutOfRange { index: vec![flat], shape: vec![cells] });
            }
            if !set.mask[flat] {
                set.mask[flat] = true;
                set.members.push(flat);
            }
        }
        set.members.sort_unstable();
        Ok(set)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, flat: usize) -> bool {
        self.mask.get(flat).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of rebuilds since initialization.
    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn multi_indices(&self, grid: &Grid) -> Vec<Vec<usize>> {
        self.members.iter().map(|&f| grid.unravel(f)).collect()
    }

    /// Replaces the members in O(old + new) without touching the rest of the mask.
    fn rebuild(&mut self, candidates: impl IntoIterator<Item = usize>) {
        for &flat in &self.members {
            self.mask[flat] = false;
        }
        self.members.clear();
        for flat in candidates {
            if !self.mask[flat] {
                self.mask[flat] = true;
                self.members.push(flat);
            }
        }
        self.members.sort_unstable();
        self.generation += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Band half-width; derived from the initial field when absent.
    pub zeta: Option<f64>,
    /// Defaults to the stencil order.
    pub pad_radius: Option<usize>,
    /// Defaults to the convergence tolerance.
    pub decrease_tol: Option<f64>,
    pub max_iterations: usize,
    /// Before stopping on an empty active set, sweep the whole band once more
    /// and resume with any cell that still decreases. Small sub-threshold
    /// decreases of neighbors can otherwise add up at a cell that already left
    /// the set.
    pub verify_band: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { zeta: None, pad_radius: None, decrease_tol: None, max_iterations: 100_000, verify_band: true }
    }
}

/// A [`PatchConfig`] with every default filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchParams {
    pub zeta: f64,
    pub pad_radius: usize,
    pub decrease_tol: f64,
    pub max_iterations: usize,
    pub verify_band: bool,
}

impl PatchConfig {
    pub fn resolve(
        &self,
        h: &ScalarField,
        numerics: &NumericsConfig,
        conv: &ConvergenceConfig,
    ) -> Result<PatchParams, SolveError> {
        let zeta = match self.zeta {
            Some(z) if z > 0.0 && z.is_finite() => z,
            Some(z) => return Err(SolveError::InvalidConfig(format!("zeta must be positive, got {z}"))),
            None => default_zeta(h),
        };
        let pad_radius = self.pad_radius.unwrap_or(numerics.stencil_order);
        if pad_radius < numerics.stencil_order {
            return Err(SolveError::InvalidConfig(format!(
                "pad radius {pad_radius} is smaller than the stencil order {}",
                numerics.stencil_order
            )));
        }
        let decrease_tol = self.decrease_tol.unwrap_or(conv.tol);
        if !(decrease_tol >= 0.0) {
            return Err(SolveError::InvalidConfig(format!("decrease tol must be nonnegative, got {decrease_tol}")));
        }
        Ok(PatchParams { zeta, pad_radius, decrease_tol, max_iterations: self.max_iterations, verify_band: self.verify_band })
    }
}

/// Three grid spacings times the largest one-sided slope of `field`, so the
/// band is several cells wide wherever the field is steep.
pub fn default_zeta(field: &ScalarField) -> f64 {
    let grid = field.grid();
    let values = field.values();
    let mut slope = 0.0f64;
    let mut index = vec![0usize; grid.ndim()];
    for (flat, &v) in values.iter().enumerate() {
        for d in 0..grid.ndim() {
            if index[d] + 1 < grid.shape()[d] {
                let next = values[flat + grid.strides()[d]];
                slope = slope.max((next - v).abs() / grid.spacing()[d]);
            }
        }
        grid.advance(&mut index);
    }
    let zeta = 3.0 * grid.max_spacing() * slope;
    if zeta > 0.0 && zeta.is_finite() {
        zeta
    } else {
        // Flat field: fall back to unit slope.
        3.0 * grid.max_spacing()
    }
}

/// Initial active set: cells with `|h| <= zeta` that are not certified.
pub fn init_active_set(h: &ScalarField, certified: Option<&CellMask>, zeta: f64) -> Result<ActiveSet, GridError> {
    if let Some(mask) = certified {
        if !mask.grid().same_layout(h.grid()) {
            return Err(GridError::ShapeMismatch);
        }
    }
    let cells = h
        .values()
        .iter()
        .enumerate()
        .filter(|&(flat, v)| v.abs() <= zeta && !certified.is_some_and(|m| m.cells()[flat]))
        .map(|(flat, _)| flat);
    ActiveSet::from_cells(h.grid().len(), cells)
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub field: ScalarField,
    pub next: ActiveSet,
    pub evals: u64,
    pub max_decrease: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy)]
struct IterationStats {
    evals: u64,
    max_decrease: f64,
    dt: f64,
}

/// Reusable buffers for repeated iterations on one grid.
struct Runner<'a> {
    kernel: Kernel<'a>,
    numerics: &'a NumericsConfig,
    params: PatchParams,
    hamiltonians: Vec<f64>,
}

impl<'a> Runner<'a> {
    fn new(d: &'a dyn ControlAffine, grid: &'a Grid, numerics: &'a NumericsConfig, params: PatchParams) -> Self {
        Self { kernel: Kernel::new(d, grid, numerics), numerics, params, hamiltonians: Vec::new() }
    }

    fn iterate(&mut self, values: &mut [f64], q: &mut ActiveSet) -> Result<IterationStats, SolveError> {
        let grid = self.kernel.grid;
        let members = &q.members;
        self.hamiltonians.resize(members.len(), 0.0);
        evaluate_cells(&self.kernel, values, members, &mut self.hamiltonians)
            .map_err(|flat| SolveError::NonFiniteValue { index: grid.unravel(flat) })?;
        let dt = self.kernel.step(self.numerics);

        // All reads above saw the old field, so writing in place keeps Jacobi semantics.
        let mut max_decrease = 0.0f64;
        let mut decreased = Vec::new();
        for (&flat, &h) in members.iter().zip(&self.hamiltonians) {
            let old = values[flat];
            let new = old + dt * h.min(0.0);
            values[flat] = new;
            max_decrease = max_decrease.max(old - new);
            if old - new > self.params.decrease_tol {
                decreased.push(flat);
            }
        }

        let PatchParams { zeta, pad_radius, .. } = self.params;
        let values: &[f64] = values;
        let candidates: Vec<Vec<usize>> = decreased
            .par_chunks(1024)
            .map(|chunk| {
                let mut index = vec![0usize; grid.ndim()];
                let mut out = Vec::with_capacity(chunk.len() * (1 + 2 * pad_radius * grid.ndim()));
                for &flat in chunk {
                    grid.unravel_into(flat, &mut index);
                    out.push(flat);
                    grid.for_each_cross_neighbor(flat, &index, pad_radius, |nb| out.push(nb));
                }
                out.retain(|&c| values[c].abs() <= zeta);
                out
            })
            .collect();
        let evals = members.len() as u64;
        q.rebuild(candidates.into_iter().flatten());
        Ok(IterationStats { evals, max_decrease, dt })
    }
}

/// One iteration of the patch loop on `q`; the input field is left untouched.
pub fn patch_iteration(
    v: &ScalarField,
    q: &ActiveSet,
    d: &dyn ControlAffine,
    numerics: &NumericsConfig,
    params: &PatchParams,
) -> Result<IterationOutcome, SolveError> {
    numerics.validate()?;
    check_dims(v, d.state_dim())?;
    if q.mask.len() != v.grid().len() {
        return Err(GridError::ShapeMismatch.into());
    }
    let mut runner = Runner::new(d, v.grid(), numerics, *params);
    let mut field = v.clone();
    let mut next = q.clone();
    let stats = runner.iterate(field.values_mut(), &mut next)?;
    Ok(IterationOutcome { field, next, evals: stats.evals, max_decrease: stats.max_decrease, dt: stats.dt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub index: Vec<usize>,
    pub hamiltonian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub boundary_cells: usize,
    pub violations: Vec<Violation>,
    /// Step used to convert Hamiltonians into per-sweep decreases.
    pub step: f64,
    pub tol: f64,
}

impl CertificateReport {
    pub fn certified(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Cells with at least one stencil neighbor on the other side of zero
/// (`>= 0` against `< 0`). Both sides of the crossing are included.
pub fn boundary_cells(field: &ScalarField) -> Vec<usize> {
    let grid = field.grid();
    let values = field.values();
    let n = grid.len();
    (0..n)
        .into_par_iter()
        .with_min_len(4096)
        .filter(|&flat| {
            let inside = values[flat] >= 0.0;
            let index = grid.unravel(flat);
            let mut crosses = false;
            grid.for_each_cross_neighbor(flat, &index, 1, |nb| crosses |= (values[nb] >= 0.0) != inside);
            crosses
        })
        .collect()
}

/// Checks that no boundary cell of `v` would drop by more than `tol` in one
/// sweep, i.e. `dt * min(0, H) >= -tol` with the solver's own step.
pub fn invariance_certificate(
    v: &ScalarField,
    d: &dyn ControlAffine,
    numerics: &NumericsConfig,
    tol: f64,
) -> Result<CertificateReport, SolveError> {
    numerics.validate()?;
    check_dims(v, d.state_dim())?;
    let boundary = boundary_cells(v);
    let kernel = Kernel::new(d, v.grid(), numerics);
    let mut hamiltonians = vec![0.0; boundary.len()];
    evaluate_cells(&kernel, v.values(), &boundary, &mut hamiltonians)
        .map_err(|flat| SolveError::NonFiniteValue { index: v.grid().unravel(flat) })?;
    let step = kernel.step(numerics);
    let violations = boundary
        .iter()
        .zip(&hamiltonians)
        .filter(|&(_, &h)| step * h.min(0.0) < -tol)
        .map(|(&flat, &h)| Violation { index: v.grid().unravel(flat), hamiltonian: h })
        .collect();
    Ok(CertificateReport { boundary_cells: boundary.len(), violations, step, tol })
}

#[derive(Debug, Clone)]
pub struct PatchSolution {
    pub field: ScalarField,
    pub stats: SolveStats,
    pub certificate: CertificateReport,
    pub params: PatchParams,
    /// `|Q^(k)|` for every iteration, starting with the initial set.
    pub active_set_sizes: Vec<usize>,
}

/// Runs the patch loop from `h` until the active set empties (after a
/// confirming sweep of the band when `verify_band` is set). Running out of
/// iterations returns the partial result, certificate included, as
/// [`SolveError::PatchNonConvergence`].
pub fn patch(
    h: &ScalarField,
    certified: Option<&CellMask>,
    d: &dyn ControlAffine,
    numerics: &NumericsConfig,
    cfg: &PatchConfig,
    conv: &ConvergenceConfig,
) -> Result<PatchSolution, SolveError> {
    validate(numerics, conv)?;
    check_dims(h, d.state_dim())?;
    if let Some(flat) = h.first_non_finite() {
        return Err(SolveError::NonFiniteValue { index: h.grid().unravel(flat) });
    }
    let start = Instant::now();
    let params = cfg.resolve(h, numerics, conv)?;
    let grid = h.grid().clone();
    let mut q = init_active_set(h, certified, params.zeta)?;
    let mut field = h.clone();
    let mut runner = Runner::new(d, &grid, numerics, params);
    let mut stats = SolveStats::default();
    let mut sizes = Vec::new();
    // Whether the most recent sweep covered the whole band.
    let mut full_band = true;

    while stats.sweeps < params.max_iterations {
        if q.is_empty() {
            if full_band || !params.verify_band {
                break;
            }
            q = init_active_set(&field, certified, params.zeta)?;
            full_band = true;
            if q.is_empty() {
                break;
            }
        } else {
            full_band = stats.sweeps == 0;
        }
        sizes.push(q.len());
        let it = runner.iterate(field.values_mut(), &mut q)?;
        stats.sweeps += 1;
        stats.hamiltonian_evals += it.evals;
        stats.max_residual_history.push(it.max_decrease);
        if stats.sweeps % 500 == 0 {
            log::debug!("patch iteration {}: |Q| = {}, max decrease {:e}", stats.sweeps, q.len(), it.max_decrease);
        }
    }
    stats.converged = q.is_empty();
    stats.wall_time = start.elapsed().as_secs_f64();
    let certificate = invariance_certificate(&field, d, numerics, conv.tol)?;
    let solution = PatchSolution { field, stats, certificate, params, active_set_sizes: sizes };
    if solution.stats.converged {
        Ok(solution)
    } else {
        Err(SolveError::PatchNonConvergence { partial: Box::new(solution) })
    }
}
