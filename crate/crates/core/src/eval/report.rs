use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::DenoiserModel;
use crate::edm::{sample, Condition, GuidanceConfig, ModelDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::harness::PoseVariant;
use crate::numeric::derive_seed;
use crate::se3::{ControlTensor, RigidTransform};
use crate::world::{ClipRecord, Dataset, Image, Scene, Split, Tokenizer};

use super::metrics::{arm_mask_from_frame, body_control_metrics, ssim, trajectory_errors};
use super::tracker::{estimate_head_trajectory, TrackerConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub ssim: f64,
    pub trans_error: f64,
    pub rot_error: f64,
    pub miou: f64,
    pub presence_accuracy: f64,
}

impl Metrics {
    pub fn validate(&self) -> Result<()> {
        let ok = (-100.0..=100.0).contains(&self.ssim)
            && (0.0..=100.0).contains(&self.miou)
            && (0.0..=100.0).contains(&self.presence_accuracy)
            && self.trans_error >= 0.0
            && self.rot_error >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("metrics out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub untracked_frames: usize,
    /// Unwrapped yaw change from the last context frame to the last
    /// generated frame, as recovered by the tracker.
    pub recovered_yaw_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint: String,
    pub dataset: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub clips: Vec<ClipMetrics>,
    pub aggregate: Metrics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Arithmetic mean of every metric over clips.
pub fn aggregate(clips: &[ClipMetrics]) -> Metrics {
    if clips.is_empty() {
        return Metrics::default();
    }
    let n = clips.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| clips.iter().map(|c| f(&c.metrics)).sum::<f64>() / n;
    Metrics {
        ssim: mean(|m| m.ssim),
        trans_error: mean(|m| m.trans_error),
        rot_error: mean(|m| m.rot_error),
        miou: mean(|m| m.miou),
        presence_accuracy: mean(|m| m.presence_accuracy),
    }
}

/// Scores `generated` (the future frames only) against a ground-truth clip.
pub fn evaluate_clip(
    scene: &Scene,
    clip: &ClipRecord,
    clip_id: usize,
    generated: &[Image],
    tracker: &TrackerConfig,
) -> Result<ClipMetrics> {
    let n = clip.context_frames;
    let truth = &clip.frames[n..];
    if generated.len() != truth.len() {
        return Err(Error::Geometry(format!(
            "{} generated frames for {} targets",
            generated.len(),
            truth.len()
        )));
    }
    let mut s = 0.0;
    for (g, t) in generated.iter().zip(truth) {
        s += ssim(g, t)?;
    }
    let poses = clip.poses.frames();
    let init = *poses[n - 1].head();
    let track = estimate_head_trajectory(generated, scene, &init, tracker)?;
    let gt: Vec<RigidTransform> = poses[n..].iter().map(|p| *p.head()).collect();
    let (trans_error, rot_error) = trajectory_errors(&track.poses(), &gt)?;
    let gen_masks: Vec<_> = generated.iter().map(arm_mask_from_frame).collect();
    let (miou, presence_accuracy) = body_control_metrics(&gen_masks, &clip.masks[n..])?;
    let init_yaw = init.yaw_of_forward();
    let recovered_yaw_change = track.states.last().map(|s| s.yaw - init_yaw).unwrap_or(0.0);
    let metrics = Metrics {
        ssim: s / generated.len() as f64,
        trans_error,
        rot_error,
        miou,
        presence_accuracy,
    };
    metrics.validate()?;
    Ok(ClipMetrics {
        clip: clip_id,
        metrics,
        untracked_frames: track.untracked(),
        recovered_yaw_change,
    })
}

/// Samples the future frames that follow `context` under `control`.
pub fn generate_future(
    model: &DenoiserModel,
    tokenizer: &Tokenizer,
    context: &[Image],
    control: &ControlTensor,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<Image>> {
    let cfg = &model.config;
    if context.len() != cfg.past_frames {
        return Err(Error::Geometry(format!(
            "{} context frames, model expects {}",
            context.len(),
            cfg.past_frames
        )));
    }
    if control.frames() != cfg.future_frames {
        return Err(Error::Geometry(format!(
            "control covers {} frames, model generates {}",
            control.frames(),
            cfg.future_frames
        )));
    }
    let first = &context[0];
    let filler = Image::filled(first.width(), first.height(), [0.5; 3]);
    let mut frames = context.to_vec();
    frames.extend(std::iter::repeat_n(filler, cfg.future_frames));
    let past = tokenizer.tokenize(&frames, cfg.past_frames)?;
    if past.geometry() != cfg.geometry() {
        return Err(Error::Geometry(format!(
            "tokenized clip {:?} does not match model geometry {:?}",
            past.geometry(),
            cfg.geometry()
        )));
    }
    let den = ModelDenoiser::new(model, schedule.sigma_data);
    let cond = Condition { past: &past, control };
    let out = sample(&den, &cond, schedule, guidance, seed)?;
    let decoded = tokenizer.detokenize(&out)?;
    Ok(decoded[cfg.past_frames..].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub tracker: TrackerConfig,
    pub seed: u64,
    pub split: Split,
    pub max_clips: Option<usize>,
    pub checkpoint: String,
}

/// Generates every clip of a split from its context and ground-truth
/// control, then scores the generations.
pub fn evaluate(
    model: &DenoiserModel,
    variant: PoseVariant,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut ids = dataset.ids(opts.split);
    if let Some(k) = opts.max_clips {
        ids.truncate(k);
    }
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no {:?} clips in {}",
            opts.split,
            dataset.root().display()
        )));
    }
    let tok = dataset.tokenizer();
    let mut clips = Vec::with_capacity(ids.len());
    for id in ids {
        let clip = dataset.load_clip(id)?;
        let control = variant.control(&clip.control_window()?);
        let generated = generate_future(
            model,
            &tok,
            &clip.frames[..clip.context_frames],
            &control,
            &opts.schedule,
            &opts.guidance,
            derive_seed(opts.seed, &[id as u64]),
        )?;
        let m = evaluate_clip(dataset.scene(), &clip, id, &generated, &opts.tracker)?;
        log::info!("clip {id}: {:?}", m.metrics);
        clips.push(m);
    }
    let aggregate = aggregate(&clips);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        checkpoint: opts.checkpoint.clone(),
        dataset: dataset.root().display().to_string(),
        seed: opts.seed,
        steps: opts.schedule.steps,
        guidance: opts.guidance.weight,
        clips,
        aggregate,
    })
}
