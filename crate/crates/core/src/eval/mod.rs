//! Frame fidelity, camera-trajectory recovery and arm-mask agreement for
//! generated clips.

pub mod metrics;
pub mod report;
pub mod tracker;

pub use metrics::{arm_mask_from_frame, body_control_metrics, iou, ssim, trajectory_errors};
pub use report::{aggregate, evaluate, evaluate_clip, generate_future, ClipMetrics, EvalOptions, EvalReport, Metrics};
pub use tracker::{estimate_head_trajectory, HeadState, TrackResult, TrackerConfig};
