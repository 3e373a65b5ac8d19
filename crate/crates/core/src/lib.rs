//! Pose-conditioned egocentric video diffusion at desk scale.
//!
//! Layout: [`se3`] builds the pose control tensor, [`numeric`] is the
//! autodiff substrate, [`dit`] and [`edm`] are the denoiser and diffusion
//! process, [`world`] renders synthetic egocentric clips with ground truth,
//! [`eval`] scores generations and [`harness`] wires training and the CLI.

pub mod dit;
pub mod edm;
pub mod error;
pub mod eval;
pub mod harness;
pub mod numeric;
pub mod se3;
pub mod world;

pub use error::{Error, Result};
