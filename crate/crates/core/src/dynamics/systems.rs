use serde::{Deserialize, Serialize};

use super::{ControlAffine, DynamicsError};

/// `x' = v`, `v' = u`, `|u| <= u_max`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    lo: [f64; 1],
    hi: [f64; 1],
}

impl DoubleIntegrator {
    pub fn new(u_max: f64) -> Self {
        Self { lo: [-u_max], hi: [u_max] }
    }

    pub fn u_max(&self) -> f64 {
        self.hi[0]
    }
}

impl ControlAffine for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = 0.0;
    }
    fn input_matrix(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }
    fn input_lo(&self) -> &[f64] {
        &self.lo
    }
    fn input_hi(&self) -> &[f64] {
        &self.hi
    }
}

/// Physical constants shared by the quadrotor models.
///
/// Each rotor produces thrust in `[0, weight]`, so total thrust lies in
/// `[0, 2 * weight]` and the pitch moment in `[-arm * weight, arm * weight]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    pub mass: f64,
    pub gravity: f64,
    pub inertia: f64,
    pub arm: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self { mass: 1.0, gravity: 9.81, inertia: 0.1, arm: 0.25 }
    }
}

impl QuadParams {
    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }
}

/// Vertical quadrotor: state `(z, vz, theta, omega)`, inputs `(thrust, moment)`.
///
/// `z'' = T cos(theta) / m - g`, `theta'' = M / I`.
#[derive(Debug, Clone)]
pub struct Quad4d {
    params: QuadParams,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Quad4d {
    pub fn new(params: QuadParams) -> Self {
        let w = params.weight();
        let moment = params.arm * w;
        Self { params, lo: [0.0, -moment], hi: [2.0 * w, moment] }
    }

    pub fn params(&self) -> &QuadParams {
        &self.params
    }
}

impl ControlAffine for Quad4d {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -self.params.gravity;
        out[2] = x[3];
        out[3] = 0.0;
    }
    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[2] = x[2].cos() / self.params.mass;
        out[7] = 1.0 / self.params.inertia;
    }
    fn input_lo(&self) -> &[f64] {
        &self.lo
    }
    fn input_hi(&self) -> &[f64] {
        &self.hi
    }
}

/// Planar quadrotor: state `(px, pz, vx, vz, theta, omega)`, inputs are the
/// two rotor thrusts `(T1, T2)`, each in `[0, weight]`.
#[derive(Debug, Clone)]
pub struct PlanarQuad6d {
    params: QuadParams,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl PlanarQuad6d {
    pub fn new(params: QuadParams) -> Self {
        let w = params.weight();
        Self { params, lo: [0.0, 0.0], hi: [w, w] }
    }

    pub fn params(&self) -> &QuadParams {
        &self.params
    }
}

impl ControlAffine for PlanarQuad6d {
    fn state_dim(&self) -> usize {
        6
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[2];
        out[1] = x[3];
        out[2] = 0.0;
        out[3] = -self.params.gravity;
        out[4] = x[5];
        out[5] = 0.0;
    }
    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let (s, c) = x[4].sin_cos();
        out.iter_mut().for_each(|v| *v = 0.0);
        // rows 2 (vx), 3 (vz), 5 (omega); two columns each
        out[4] = -s / p.mass;
        out[5] = -s / p.mass;
        out[6] = c / p.mass;
        out[7] = c / p.mass;
        out[10] = p.arm / p.inertia;
        out[11] = -p.arm / p.inertia;
    }
    fn input_lo(&self) -> &[f64] {
        &self.lo
    }
    fn input_hi(&self) -> &[f64] {
        &self.hi
    }
}

/// `x' = A x + B u` over a box of inputs.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl LinearSystem {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, DynamicsError> {
        let n = a.len();
        let m = lo.len();
        if let Some(row) = a.iter().find(|r| r.len() != n) {
            return Err(DynamicsError::DimensionMismatch { expected: n, found: row.len() });
        }
        if b.len() != n {
            return Err(DynamicsError::DimensionMismatch { expected: n, found: b.len() });
        }
        if let Some(row) = b.iter().find(|r| r.len() != m) {
            return Err(DynamicsError::DimensionMismatch { expected: m, found: row.len() });
        }
        if hi.len() != m {
            return Err(DynamicsError::DimensionMismatch { expected: m, found: hi.len() });
        }
        if let Some(i) = (0..m).find(|&i| !(lo[i] <= hi[i])) {
            return Err(DynamicsError::InputOutOfBounds { input: i, value: lo[i], lo: lo[i], hi: hi[i] });
        }
        Ok(Self { a, b, lo, hi })
    }
}

impl ControlAffine for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.len()
    }
    fn input_dim(&self) -> usize {
        self.lo.len()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.a) {
            *o = row.iter().zip(x).map(|(a, x)| a * x).sum();
        }
    }
    fn input_matrix(&self, _x: &[f64], out: &mut [f64]) {
        let m = self.input_dim();
        for (i, row) in self.b.iter().enumerate() {
            out[i * m..(i + 1) * m].copy_from_slice(row);
        }
    }
    fn input_lo(&self) -> &[f64] {
        &self.lo
    }
    fn input_hi(&self) -> &[f64] {
        &self.hi
    }
}
