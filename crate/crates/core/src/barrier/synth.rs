//! Synthetic almost-barriers: a known field plus a controlled perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ScalarField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// `amplitude * (1 + cos(pi r / radius)) / 2` inside the ball, zero outside.
    RadialBump,
    /// `amplitude` everywhere.
    AdditiveConstant,
    /// Uniform noise in `[0, amplitude)` on cells with `|truth| <= radius`.
    BandNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationSign {
    /// Raises the field, so the result over-approximates the truth.
    Optimistic,
    Pessimistic,
}

impl PerturbationSign {
    fn factor(self) -> f64 {
        match self {
            PerturbationSign::Optimistic => 1.0,
            PerturbationSign::Pessimistic => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    #[serde(default)]
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    pub sign: PerturbationSign,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("perturbation radius must be positive, got {0}")]
    Radius(f64),
    #[error("perturbation amplitude must be finite and nonnegative, got {0}")]
    Amplitude(f64),
    #[error("bump center has {found} coordinates, grid has {expected} axes")]
    Center { expected: usize, found: usize },
}

impl PerturbationSpec {
    pub fn validate(&self, ndim: usize) -> Result<(), SynthError> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(SynthError::Radius(self.radius));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(SynthError::Amplitude(self.amplitude));
        }
        if self.kind == PerturbationKind::RadialBump && self.center.len() != ndim {
            return Err(SynthError::Center { expected: ndim, found: self.center.len() });
        }
        Ok(())
    }
}

/// `truth` plus the perturbation described by `spec`. An optimistic spec never
/// lowers a cell; a pessimistic one never raises one.
pub fn synth_almost_barrier(truth: &ScalarField, spec: &PerturbationSpec) -> Result<ScalarField, SynthError> {
    let grid = truth.grid();
    spec.validate(grid.ndim())?;
    let s = spec.sign.factor() * spec.amplitude;
    let mut out = truth.clone();
    match spec.kind {
        PerturbationKind::AdditiveConstant => out.values_mut().iter_mut().for_each(|v| *v += s),
        PerturbationKind::RadialBump => {
            let mut index = vec![0usize; grid.ndim()];
            let mut x = vec![0.0; grid.ndim()];
            for v in out.values_mut() {
                grid.state_into(&index, &mut x);
                let r = x.iter().zip(&spec.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                if r < spec.radius {
                    *v += s * 0.5 * (1.0 + (std::f64::consts::PI * r / spec.radius).cos());
                }
                grid.advance(&mut index);
            }
        }
        PerturbationKind::BandNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for v in out.values_mut() {
                if v.abs() <= spec.radius {
                    *v += s * rng.gen::<f64>();
                }
            }
        }
    }
    Ok(out)
}
