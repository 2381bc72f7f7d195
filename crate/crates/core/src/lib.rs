//! Grid-based Hamilton-Jacobi viability analysis with local patching of
//! almost-barrier value functions.
//!
//! The usual flow: build a [`grid::Grid`], sample a value function on it as a
//! [`grid::ScalarField`], then either solve globally with
//! [`solver::solve_global`] or repair only the cells near the zero level with
//! [`solver::patch`]. The repaired field can drive a safety filter
//! ([`filter`]) in closed-loop rollouts ([`rollout`]).

pub mod barrier;
pub mod compare;
pub mod contour;
pub mod dynamics;
pub mod filter;
pub mod grid;
pub mod numerics;
pub mod rollout;
pub mod solver;
