//! Shaped arrays, reverse-mode gradients, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod random;
mod tensor;

pub use graph::{gelu_scalar, silu_scalar, Graph, LeafGrads, Var};
pub use params::{AdamConfig, ParamId, ParameterStore};
pub use random::{derive_seed, normal_vec, rng_from, seeded_normal, sinusoidal_embedding};
pub use tensor::Tensor;
