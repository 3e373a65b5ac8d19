use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::RunConfig;
use super::train::load_checkpoint;
use crate::dit::DenoiserModel;
use crate::error::{Error, Result};
use crate::eval::generate_future;
use crate::se3::{read_pose_jsonl, write_pose_jsonl, PoseSequence};
use crate::world::dataset::frames_to_bytes;
use crate::world::{Dataset, Image};

/// Where the pose window driving the generation comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseSource {
    /// The clip's own future poses.
    SameClip,
    /// The future poses of another clip (cross-pairing).
    Clip(usize),
    /// The last context pose held still: all deltas zero.
    Static,
    /// A pose JSON-lines file holding the `M + 1` window frames.
    File(PathBuf),
}

impl fmt::Display for PoseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoseSource::SameClip => f.write_str("same"),
            PoseSource::Clip(id) => write!(f, "clip:{id}"),
            PoseSource::Static => f.write_str("static"),
            PoseSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for PoseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => return Ok(PoseSource::SameClip),
            "static" => return Ok(PoseSource::Static),
            _ => {}
        }
        if let Some(id) = s.strip_prefix("clip:") {
            let id = id
                .parse()
                .map_err(|_| Error::Config(format!("pose source `{s}`: bad clip id")))?;
            return Ok(PoseSource::Clip(id));
        }
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(PoseSource::File(PathBuf::from(p)));
        }
        Err(Error::Config(format!(
            "unknown pose source `{s}` (expected same, static, clip:<id> or file:<path>)"
        )))
    }
}

/// Pose window for a generation whose context comes from clip `clip`.
pub fn pose_window(dataset: &Dataset, clip: usize, source: &PoseSource) -> Result<PoseSequence> {
    let own = dataset.load_clip(clip)?;
    match source {
        PoseSource::SameClip => own.control_window(),
        PoseSource::Clip(other) => dataset.load_clip(*other)?.control_window(),
        PoseSource::Static => {
            let w = own.control_window()?;
            let still = vec![w.frames()[0].clone(); w.frames().len()];
            Ok(PoseSequence::new(still, w.dt())?)
        }
        PoseSource::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            read_pose_jsonl(&text).map_err(|e| Error::format(path, e))
        }
    }
}

/// Generates the future of `clip` under poses from `source`.
pub fn generate_with_source(
    config: &RunConfig,
    model: &DenoiserModel,
    dataset: &Dataset,
    clip: usize,
    source: &PoseSource,
    seed: u64,
) -> Result<(Vec<Image>, PoseSequence)> {
    let window = pose_window(dataset, clip, source)?;
    if window.num_targets() != model.config.future_frames {
        return Err(Error::Geometry(format!(
            "pose source {source} provides M = {} future frames, checkpoint generates M = {}",
            window.num_targets(),
            model.config.future_frames
        )));
    }
    let control = config.variant.control(&window);
    let record = dataset.load_clip(clip)?;
    let frames = generate_future(
        model,
        &dataset.tokenizer(),
        &record.frames[..record.context_frames],
        &control,
        &config.schedule,
        &config.guidance,
        seed,
    )?;
    Ok((frames, window))
}

/// Frames side by side, each scaled up by `zoom`.
pub fn png_strip(frames: &[Image], zoom: usize) -> image::RgbImage {
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width(), f.height()));
    let mut out = image::RgbImage::new((w * zoom * frames.len()) as u32, (h * zoom) as u32);
    for (k, f) in frames.iter().enumerate() {
        for y in 0..h * zoom {
            for x in 0..w * zoom {
                let p = f.pixel(x / zoom, y / zoom);
                let px = image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
                out.put_pixel((k * w * zoom + x) as u32, y as u32, px);
            }
        }
    }
    out
}

/// Runs one generation and writes `frames.bin` (dataset frame format),
/// `poses.jsonl` (the driving window) and `strip.png` (last context frame
/// followed by the generated ones) into `out`.
pub fn sample_cmd(
    config: &RunConfig,
    checkpoint: &Path,
    clip: usize,
    source: &PoseSource,
    seed: u64,
    out: &Path,
) -> Result<Vec<Image>> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let dataset = Dataset::open(&config.dataset)?;
    let (frames, window) = generate_with_source(config, &model, &dataset, clip, source, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let bin = out.join("frames.bin");
    fs::write(&bin, frames_to_bytes(&frames)).map_err(|e| Error::io(&bin, e))?;
    let poses = out.join("poses.jsonl");
    fs::write(&poses, write_pose_jsonl(&window)).map_err(|e| Error::io(&poses, e))?;
    let record = dataset.load_clip(clip)?;
    let mut strip = vec![record.frames[record.context_frames - 1].clone()];
    strip.extend(frames.iter().cloned());
    let png = out.join("strip.png");
    png_strip(&strip, 4).save(&png).map_err(|e| Error::format(&png, e))?;
    Ok(frames)
}
