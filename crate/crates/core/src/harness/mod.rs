//! Run configuration, training loop, checkpoints, sampling and the ablation
//! grid behind the command-line tool.

pub mod ablate;
pub mod config;
pub mod sample;
pub mod train;
pub mod variant;

pub use ablate::{ablate, eval_options, run_cell, AblationRow, AblationTable, Cell, GridConfig};
pub use config::{load_config, EvalSection, ModelSection, OptimizerSection, RunConfig};
pub use sample::{generate_with_source, png_strip, pose_window, sample_cmd, PoseSource};
pub use train::{load_checkpoint, read_log, save_checkpoint, train, LogRecord, TrainState, Trainer};
pub use variant::{Mechanism, PoseVariant};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "POSEVID_THREADS";

/// Worker threads for run-level parallelism; 1 when unset or invalid.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
