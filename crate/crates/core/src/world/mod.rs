//! Procedural egocentric room: trajectories, skeleton, renderer with exact
//! arm masks, an invertible tokenizer and the on-disk dataset format.

pub mod agent;
pub mod dataset;
pub mod image;
pub mod render;
pub mod scene;
pub mod tokenizer;

pub use agent::{
    sample_trajectory, skeleton_to_body_pose, wrap_angle, AgentState, ArmAngles, Gesture, TrajectoryConfig,
};
pub use dataset::{generate_dataset, ClipEntry, ClipRecord, Dataset, DatasetConfig, Manifest, Split};
pub use image::{quantize, Image, Mask};
pub use render::{render_frame, render_pose, render_scene, render_scene_continuous, Camera};
pub use scene::{Scene, SceneConfig, Surface, ARM_COLOR};
pub use tokenizer::Tokenizer;
