//! The TOML run configuration shared by every command.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use hjpatch::barrier::PerturbationSpec;
use hjpatch::dynamics::{
    linearize, solve_lqr, AxisBound, BoxConstraint, ControlAffine, DoubleIntegrator, LinearSystem, PlanarQuad6d,
    Policy, Quad4d, QuadParams,
};
use hjpatch::filter::FilterConfig;
use hjpatch::grid::Grid;
use hjpatch::numerics::NumericsConfig;
use hjpatch::rollout::RolloutConfig;
use hjpatch::solver::{ConvergenceConfig, PatchConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub grid: GridConfig,
    /// Constraint set as intervals on state coordinates.
    #[serde(default)]
    pub constraint: Vec<AxisBound>,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub patch: PatchConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub rollout: RolloutSection,
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    DoubleIntegrator {
        #[serde(default = "one")]
        u_max: f64,
    },
    Quad4d {
        #[serde(default)]
        params: QuadParams,
    },
    PlanarQuad6d {
        #[serde(default)]
        params: QuadParams,
    },
    /// `x' = A x + B u` with box input bounds.
    Custom { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, u_lo: Vec<f64>, u_hi: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub count: usize,
    pub horizon: f64,
    pub dt: f64,
    pub divergence_margin: f64,
    /// Starts are sampled where the value function is at least this.
    pub start_margin: f64,
    pub max_attempts: usize,
    pub nominal: Option<PolicyConfig>,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self {
            count: 1000,
            horizon: r.horizon,
            dt: r.dt,
            divergence_margin: r.divergence_margin,
            start_margin: 0.0,
            max_attempts: 1_000_000,
            nominal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Constant { u: Vec<f64> },
    /// `u = u_ref - K (x - x_ref)`.
    Linear { gain: Vec<Vec<f64>>, x_ref: Vec<f64>, u_ref: Vec<f64> },
    /// LQR about `(x_ref, u_ref)` with diagonal weights.
    Lqr { q_diag: Vec<f64>, r_diag: Vec<f64>, x_ref: Vec<f64>, u_ref: Vec<f64> },
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((Self::parse(text)?, bytes))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let grid = self.grid()?;
        let d = self.dynamics()?;
        if d.state_dim() != grid.ndim() {
            return Err(CliError::Config(format!(
                "system has {} states but the grid has {} axes",
                d.state_dim(),
                grid.ndim()
            )));
        }
        if let Some(b) = self.constraint.iter().find(|b| b.axis >= grid.ndim() || !(b.lo < b.hi)) {
            return Err(CliError::Config(format!("invalid constraint bound {b:?}")));
        }
        self.numerics.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.convergence.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.filter.validate(d.input_dim()).map_err(|e| CliError::Config(e.to_string()))?;
        self.rollout_config(true).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = &self.perturbation {
            p.validate(grid.ndim()).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<Grid>, CliError> {
        Grid::new(self.grid.lo.clone(), self.grid.hi.clone(), self.grid.shape.clone())
            .map(Arc::new)
            .map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn dynamics(&self) -> Result<Arc<dyn ControlAffine>, CliError> {
        Ok(match &self.system {
            SystemConfig::DoubleIntegrator { u_max } => {
                if !(*u_max > 0.0) {
                    return Err(CliError::Config(format!("u_max must be positive, got {u_max}")));
                }
                Arc::new(DoubleIntegrator::new(*u_max))
            }
            SystemConfig::Quad4d { params } => Arc::new(Quad4d::new(*params)),
            SystemConfig::PlanarQuad6d { params } => Arc::new(PlanarQuad6d::new(*params)),
            SystemConfig::Custom { a, b, u_lo, u_hi } => Arc::new(
                LinearSystem::new(a.clone(), b.clone(), u_lo.clone(), u_hi.clone())
                    .map_err(|e| CliError::Config(format!("custom system: {e}")))?,
            ),
        })
    }

    pub fn system_name(&self) -> &'static str {
        match self.system {
            SystemConfig::DoubleIntegrator { .. } => "double_integrator",
            SystemConfig::Quad4d { .. } => "quad4d",
            SystemConfig::PlanarQuad6d { .. } => "planar_quad6d",
            SystemConfig::Custom { .. } => "custom",
        }
    }

    pub fn constraint(&self) -> Result<BoxConstraint, CliError> {
        if self.constraint.is_empty() {
            return Err(CliError::Config("missing key `constraint`".into()));
        }
        Ok(BoxConstraint::new(self.constraint.clone()))
    }

    pub fn rollout_config(&self, filtered: bool) -> RolloutConfig {
        RolloutConfig {
            horizon: self.rollout.horizon,
            dt: self.rollout.dt,
            filtered,
            divergence_margin: self.rollout.divergence_margin,
        }
    }

    pub fn nominal_policy(&self, d: &dyn ControlAffine) -> Result<Policy, CliError> {
        let p = self.rollout.nominal.as_ref().ok_or_else(|| CliError::Config("missing key `rollout.nominal`".into()))?;
        let (n, m) = (d.state_dim(), d.input_dim());
        let check = |what: &str, found: usize, expected: usize| {
            if found == expected {
                Ok(())
            } else {
                Err(CliError::Config(format!("rollout.nominal.{what} has {found} entries, expected {expected}")))
            }
        };
        Ok(match p {
            PolicyConfig::Constant { u } => {
                check("u", u.len(), m)?;
                Policy::Constant(u.clone())
            }
            PolicyConfig::Linear { gain, x_ref, u_ref } => {
                check("gain", gain.len(), m)?;
                for row in gain {
                    check("gain row", row.len(), n)?;
                }
                check("x_ref", x_ref.len(), n)?;
                check("u_ref", u_ref.len(), m)?;
                Policy::Linear { gain: gain.clone(), x_ref: x_ref.clone(), u_ref: u_ref.clone() }
            }
            PolicyConfig::Lqr { q_diag, r_diag, x_ref, u_ref } => {
                check("q_diag", q_diag.len(), n)?;
                check("r_diag", r_diag.len(), m)?;
                check("x_ref", x_ref.len(), n)?;
                check("u_ref", u_ref.len(), m)?;
                let (a, b) = linearize(d, x_ref, u_ref);
                let q = DMatrix::from_diagonal(&q_diag.clone().into());
                let r = DMatrix::from_diagonal(&r_diag.clone().into());
                let sol = solve_lqr(&a, &b, &q, &r).map_err(|e| CliError::Config(format!("nominal LQR: {e}")))?;
                sol.policy(x_ref.clone(), u_ref.clone())
            }
        })
    }
}
