//! Axis-aligned Cartesian grids over a state-space box and the scalar fields
//! that live on them.
//!
//! Cells are addressed either by a multi-index (one coordinate per axis) or by
//! a flat row-major offset, where the last axis varies fastest. Cell `i` along
//! axis `d` sits at `lo[d] + i * spacing[d]`, so the first and last cells sit
//! exactly on the box faces.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate axis {axis}: need lo < hi and at least 3 cells")]
    DegenerateAxis { axis: usize },
    #[error("grid with shape {shape:?} exceeds addressable memory")]
    CapacityExceeded { shape: Vec<usize> },
    #[error("index {index:?} out of range for shape {shape:?}")]
    IndexOutOfRange { index: Vec<usize>, shape: Vec<usize> },
    #[error("state {state:?} lies outside the grid box")]
    OutOfDomain { state: Vec<f64> },
    #[error("field has {found} values but the grid has {expected} cells")]
    LengthMismatch { expected: usize, found: usize },
    #[error("grids differ")]
    ShapeMismatch,
}

/// Cartesian discretization of a box in state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self, GridError> {
        let n = lo.len();
        if n == 0 {
            return Err(GridError::DimensionMismatch { expected: 1, found: 0 });
        }
        for len in [hi.len(), shape.len()] {
            if len != n {
                return Err(GridError::DimensionMismatch { expected: n, found: len });
            }
        }
        for axis in 0..n {
            let ok = lo[axis].is_finite()
                && hi[axis].is_finite()
                && lo[axis] < hi[axis]
                && shape[axis] >= 3;
            if !ok {
                return Err(GridError::DegenerateAxis { axis });
            }
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .filter(|&len| len.checked_mul(std::mem::size_of::<f64>()).is_some_and(|b| b <= isize::MAX as usize))
            .ok_or_else(|| GridError::CapacityExceeded { shape: shape.clone() })?;

        let spacing = (0..n)
            .map(|d| (hi[d] - lo[d]) / (shape[d] - 1) as f64)
            .collect();
        let mut strides = vec![1usize; n];
        for d in (0..n - 1).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        Ok(Self { lo, hi, shape, spacing, strides, len })
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn contains_index(&self, index: &[usize]) -> bool {
        index.len() == self.ndim() && index.iter().zip(&self.shape).all(|(&i, &s)| i < s)
    }

    fn check_index(&self, index: &[usize]) -> Result<(), GridError> {
        if index.len() != self.ndim() {
            return Err(GridError::DimensionMismatch { expected: self.ndim(), found: index.len() });
        }
        if !self.contains_index(index) {
            return Err(GridError::IndexOutOfRange { index: index.to_vec(), shape: self.shape.clone() });
        }
        Ok(())
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize, GridError> {
        self.check_index(index)?;
        Ok(self.flat_unchecked(index))
    }

    pub(crate) fn flat_unchecked(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Writes the multi-index of flat cell `flat` into `out`.
    pub fn unravel_into(&self, mut flat: usize, out: &mut [usize]) {
        for (d, &stride) in self.strides.iter().enumerate() {
            out[d] = flat / stride;
            flat %= stride;
        }
    }

    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        self.unravel_into(flat, &mut out);
        out
    }

    /// Advances `index` to the next cell in row-major order. Returns false
    /// after wrapping past the last cell.
    pub fn advance(&self, index: &mut [usize]) -> bool {
        for d in (0..index.len()).rev() {
            index[d] += 1;
            if index[d] < self.shape[d] {
                return true;
            }
            index[d] = 0;
        }
        false
    }

    pub fn state_into(&self, index: &[usize], out: &mut [f64]) {
        for d in 0..self.ndim() {
            out[d] = self.coordinate(d, index[d]);
        }
    }

    pub(crate) fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.shape[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.spacing[axis]
        }
    }

    pub fn state_of(&self, index: &[usize]) -> Result<Vec<f64>, GridError> {
        self.check_index(index)?;
        let mut out = vec![0.0; self.ndim()];
        self.state_into(index, &mut out);
        Ok(out)
    }

    /// Nearest cell to `state`.
    pub fn index_of(&self, state: &[f64]) -> Result<Vec<usize>, GridError> {
        if state.len() != self.ndim() {
            return Err(GridError::DimensionMismatch { expected: self.ndim(), found: state.len() });
        }
        if !self.contains_state(state) {
            return Err(GridError::OutOfDomain { state: state.to_vec() });
        }
        Ok((0..self.ndim())
            .map(|d| {
                let t = ((state[d] - self.lo[d]) / self.spacing[d]).round();
                (t.max(0.0) as usize).min(self.shape[d] - 1)
            })
            .collect())
    }

    pub fn contains_state(&self, state: &[f64]) -> bool {
        state.len() == self.ndim()
            && (0..self.ndim()).all(|d| {
                let slack = 1e-12 * (self.hi[d] - self.lo[d]);
                state[d] >= self.lo[d] - slack && state[d] <= self.hi[d] + slack
            })
    }

    /// Clamps `state` into the grid box in place; returns true when any
    /// coordinate moved by more than round-off.
    pub fn clamp_state(&self, state: &mut [f64]) -> bool {
        let mut moved = false;
        for d in 0..self.ndim() {
            let slack = 1e-12 * (self.hi[d] - self.lo[d]);
            if state[d] < self.lo[d] - slack || state[d] > self.hi[d] + slack || state[d].is_nan() {
                moved = true;
            }
            state[d] = if state[d].is_nan() { self.lo[d] } else { state[d].clamp(self.lo[d], self.hi[d]) };
        }
        moved
    }

    /// Axis-aligned cross of cells within `radius` steps along each single
    /// axis, clipped to the grid, excluding `index` itself.
    pub fn neighbors(&self, index: &[usize], radius: usize) -> Result<Vec<Vec<usize>>, GridError> {
        self.check_index(index)?;
        let mut out = Vec::with_capacity(2 * radius * self.ndim());
        let flat = self.flat_unchecked(index);
        self.for_each_cross_neighbor(flat, index, radius, |nb| out.push(self.unravel(nb)));
        Ok(out)
    }

    /// Calls `f` with the flat index of every cross-stencil neighbor of `flat`.
    pub(crate) fn for_each_cross_neighbor(
        &self,
        flat: usize,
        index: &[usize],
        radius: usize,
        mut f: impl FnMut(usize),
    ) {
        for d in 0..self.ndim() {
            let stride = self.strides[d];
            let i = index[d];
            for r in 1..=radius {
                if i >= r {
                    f(flat - r * stride);
                }
                if i + r < self.shape[d] {
                    f(flat + r * stride);
                }
            }
        }
    }

    pub(crate) fn same_layout(&self, other: &Grid) -> bool {
        self == other
    }
}

/// One real value per grid cell, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch { expected: grid.len(), found: values.len() });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Self {
        let values = vec![value; grid.len()];
        Self { grid, values }
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: Arc<Grid>, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let n = grid.ndim();
        let mut index = vec![0usize; n];
        let mut x = vec![0.0; n];
        let mut values = Vec::with_capacity(grid.len());
        loop {
            grid.state_into(&index, &mut x);
            values.push(f(&x));
            if !grid.advance(&mut index) {
                break;
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Exchanges the value buffer with `other`, which must have the same length.
    pub(crate) fn swap_values(&mut self, other: &mut Vec<f64>) {
        debug_assert_eq!(other.len(), self.values.len());
        std::mem::swap(&mut self.values, other);
    }

    pub fn get(&self, index: &[usize]) -> Result<f64, GridError> {
        Ok(self.values[self.grid.flat_index(index)?])
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Number of cells with value >= 0.
    pub fn count_nonnegative(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.0).count()
    }

    /// Multilinear interpolation; fails outside the grid box.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64, GridError> {
        self.check_query(x)?;
        Ok(self.interpolate_unchecked(x))
    }

    /// Interpolates at `x` after clamping it into the box. The flag reports
    /// whether clamping moved the query.
    pub fn interpolate_clamped(&self, x: &[f64]) -> Result<(f64, bool), GridError> {
        self.check_dims(x)?;
        let mut q = x.to_vec();
        let clamped = self.grid.clamp_state(&mut q);
        Ok((self.interpolate_unchecked(&q), clamped))
    }

    /// Gradient at `x`: central differences at the surrounding cells (one-sided
    /// on the faces), interpolated multilinearly.
    pub fn interpolate_gradient(&self, x: &[f64]) -> Result<Vec<f64>, GridError> {
        self.check_query(x)?;
        let mut out = vec![0.0; self.grid.ndim()];
        self.gradient_unchecked(x, &mut out);
        Ok(out)
    }

    pub fn interpolate_gradient_clamped(&self, x: &[f64]) -> Result<(Vec<f64>, bool), GridError> {
        self.check_dims(x)?;
        let mut q = x.to_vec();
        let clamped = self.grid.clamp_state(&mut q);
        let mut out = vec![0.0; self.grid.ndim()];
        self.gradient_unchecked(&q, &mut out);
        Ok((out, clamped))
    }

    fn check_dims(&self, x: &[f64]) -> Result<(), GridError> {
        if x.len() != self.grid.ndim() {
            return Err(GridError::DimensionMismatch { expected: self.grid.ndim(), found: x.len() });
        }
        Ok(())
    }

    fn check_query(&self, x: &[f64]) -> Result<(), GridError> {
        self.check_dims(x)?;
        if !self.grid.contains_state(x) {
            return Err(GridError::OutOfDomain { state: x.to_vec() });
        }
        Ok(())
    }

    /// Lower corner cell and fractional offsets of the interpolation cell.
    fn locate(&self, x: &[f64], base: &mut [usize], frac: &mut [f64]) {
        let g = &*self.grid;
        for d in 0..g.ndim() {
            let mut t = ((x[d] - g.lo[d]) / g.spacing[d]).clamp(0.0, (g.shape[d] - 1) as f64);
            // Snap round-off so queries at cell centers reproduce cell values.
            if (t - t.round()).abs() < 1e-9 {
                t = t.round();
            }
            let b = (t.floor() as usize).min(g.shape[d] - 2);
            base[d] = b;
            frac[d] = (t - b as f64).clamp(0.0, 1.0);
        }
    }

    /// Visits the 2^n corners of the interpolation cell around `x` with their
    /// multilinear weights. Zero-weight corners are skipped.
    fn for_each_corner(&self, x: &[f64], mut f: impl FnMut(usize, &[usize], f64)) {
        let n = self.grid.ndim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        self.locate(x, &mut base, &mut frac);
        let mut corner = vec![0usize; n];
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            for d in 0..n {
                let upper = (mask >> d) & 1 == 1;
                corner[d] = base[d] + upper as usize;
                w *= if upper { frac[d] } else { 1.0 - frac[d] };
            }
            if w != 0.0 {
                f(self.grid.flat_unchecked(&corner), &corner, w);
            }
        }
    }

    fn interpolate_unchecked(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_corner(x, |flat, _, w| acc += w * self.values[flat]);
        acc
    }

    fn gradient_unchecked(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let g = &*self.grid;
        self.for_each_corner(x, |flat, corner, w| {
            for d in 0..g.ndim() {
                out[d] += w * self.central_difference(flat, corner, d);
            }
        });
    }

    fn central_difference(&self, flat: usize, index: &[usize], axis: usize) -> f64 {
        let g = &*self.grid;
        let stride = g.strides[axis];
        let h = g.spacing[axis];
        let i = index[axis];
        let v = &self.values;
        if i == 0 {
            (v[flat + stride] - v[flat]) / h
        } else if i + 1 == g.shape[axis] {
            (v[flat] - v[flat - stride]) / h
        } else {
            (v[flat + stride] - v[flat - stride]) / (2.0 * h)
        }
    }
}

/// One boolean per grid cell, e.g. cells certified safe by an external oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMask {
    grid: Arc<Grid>,
    cells: Vec<bool>,
}

impl CellMask {
    pub fn new(grid: Arc<Grid>, cells: Vec<bool>) -> Result<Self, GridError> {
        if cells.len() != grid.len() {
            return Err(GridError::LengthMismatch { expected: grid.len(), found: cells.len() });
        }
        Ok(Self { grid, cells })
    }

    pub fn empty(grid: Arc<Grid>) -> Self {
        let cells = vec![false; grid.len()];
        Self { grid, cells }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn set(&mut self, flat: usize, value: bool) {
        self.cells[flat] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}
