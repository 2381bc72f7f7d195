//! Value-function files, synthetic almost-barriers and barrier diagnostics.

mod epsilon;
mod io;
mod sdf;
mod synth;

pub use epsilon::{inner_boundary_cells, measure_epsilon, EpsilonReport};
pub use io::{load_field, load_mask, save_field, save_mask, FieldFile, FormatError, Payload, MAGIC, VERSION};
pub use sdf::{signed_distance_reconstruct, Reconstruction};
pub use synth::{synth_almost_barrier, PerturbationKind, PerturbationSign, PerturbationSpec, SynthError};
