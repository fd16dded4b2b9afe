//! Differentiable-computation substrate: dense tensors, a reverse-mode
//! tape, Adam, similarity kernels, seeded RNG and checkpoint I/O.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod rng;
mod similarity;
mod tensor;

pub use adam::{lr_at, AdamState, BASE_LR, LR_DECAY, LR_DECAY_EVERY};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var, NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use rng::{seeded_rng, stream_id, stream_id_bytes, stream_id_of, SeededRng};
pub use similarity::{cosine_sim, dot, norm, normalized, squared_distance};
pub use tensor::{matmul, Tensor};

#[cfg(test)]
mod tests;
