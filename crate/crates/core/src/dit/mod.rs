//! Diffusion transformer denoiser over latent video tokens.

mod config;
mod latent;
mod model;

pub use config::{latent_frames_for, DiTConfig, TEMPORAL_FACTOR};
pub use latent::{LatentGeometry, LatentVideo, Patchifier};
pub use model::{
    adaln, combine_conditioning, pose_positional_encoding, AttnWeights, BlockWeights, Component, DenoiserModel, Dense,
    ForwardBatch, ModWeights, ModulationTriple, PoseConditioner, PoseFlags, TwoLayer,
};
