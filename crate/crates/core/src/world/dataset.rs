use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{derive_seed, rng_from};
use crate::se3::{read_pose_jsonl, write_pose_jsonl, BodyPoseFrame, PoseSequence};

use super::agent::{sample_trajectory, skeleton_to_body_pose, TrajectoryConfig};
use super::image::{Image, Mask};
use super::render::render_pose;
use super::scene::{Scene, SceneConfig};
use super::tokenizer::Tokenizer;

pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Frames simulated and discarded before the first clip of a trajectory.
const WARMUP_FRAMES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub clips: usize,
    pub clip_len: usize,
    pub context_frames: usize,
    pub width: usize,
    pub height: usize,
    pub clips_per_trajectory: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub scene_seed: u64,
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            clips: 100,
            clip_len: 45,
            context_frames: 13,
            width: 48,
            height: 48,
            clips_per_trajectory: 4,
            val_fraction: 0.1,
            test_fraction: 0.1,
            scene_seed: 0,
            scene: SceneConfig::default(),
            trajectory: TrajectoryConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clips == 0 {
            return bad("clips must be positive".into());
        }
        if self.context_frames == 0 || self.context_frames >= self.clip_len {
            return bad(format!(
                "context_frames {} must lie in 1..clip_len ({})",
                self.context_frames, self.clip_len
            ));
        }
        if !(self.context_frames - 1).is_multiple_of(4) || !(self.clip_len - self.context_frames).is_multiple_of(4) {
            return bad("context_frames must be 1 mod 4 and the future length a multiple of 4".into());
        }
        if self.clips_per_trajectory == 0 {
            return bad("clips_per_trajectory must be positive".into());
        }
        if !(0.0..1.0).contains(&(self.val_fraction + self.test_fraction))
            || self.val_fraction < 0.0
            || self.test_fraction < 0.0
        {
            return bad("split fractions must be non-negative and sum below 1".into());
        }
        self.trajectory.validate()
    }

    pub fn trajectories(&self) -> usize {
        self.clips.div_ceil(self.clips_per_trajectory)
    }

    pub fn future_frames(&self) -> usize {
        self.clip_len - self.context_frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: usize,
    pub trajectory: usize,
    pub trajectory_seed: u64,
    /// First frame of the clip within its trajectory (after warm-up).
    pub start: usize,
    pub split: Split,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub scene: Scene,
    pub clips: Vec<ClipEntry>,
}

/// One clip: frames, poses and arm masks, with `context_frames` leading
/// frames used as conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    pub poses: PoseSequence,
    pub context_frames: usize,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.masks.len() != n || self.poses.frames().len() != n {
            return Err(Error::Data(format!(
                "clip lengths differ: {} frames, {} masks, {} poses",
                n,
                self.masks.len(),
                self.poses.frames().len()
            )));
        }
        if self.context_frames == 0 || self.context_frames >= n {
            return Err(Error::Data(format!("split index {} out of {n}", self.context_frames)));
        }
        for (f, m) in self.frames.iter().zip(&self.masks) {
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if m.get(x, y) && f.pixel(x, y) != [1.0, 0.0, 1.0] {
                        return Err(Error::Data(format!("mask pixel ({x}, {y}) is not arm colored")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pose window covering the last context frame and every future frame:
    /// `M + 1` frames, so `M` deltas.
    pub fn control_window(&self) -> Result<PoseSequence> {
        Ok(self.poses.window(self.context_frames - 1, self.frames.len())?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn frames_to_bytes(frames: &[Image]) -> Vec<u8> {
    frames
        .iter()
        .flat_map(|f| f.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

pub fn frames_from_bytes(bytes: &[u8], width: usize, height: usize) -> Result<Vec<Image>> {
    let per = width * height * 3 * 4;
    if per == 0 || !bytes.len().is_multiple_of(per) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {width}x{height} frames",
            bytes.len()
        )));
    }
    bytes
        .chunks(per)
        .map(|c| {
            let data = c
                .chunks(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Image::new(width, height, data)
        })
        .collect()
}

fn masks_from_bytes(bytes: &[u8], width: usize, height: usize) -> Result<Vec<Mask>> {
    let per = width * height;
    if !bytes.len().is_multiple_of(per) {
        return Err(Error::Data("mask file size mismatch".into()));
    }
    bytes
        .chunks(per)
        .map(|c| Mask::new(width, height, c.to_vec()))
        .collect()
}

/// Writes a dataset directory and returns its manifest.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let scene = Scene::generate(&config.scene, derive_seed(seed, &[config.scene_seed]))?;
    let n_traj = config.trajectories();
    let mut order: Vec<usize> = (0..n_traj).collect();
    order.shuffle(&mut rng_from(seed, &[0x511]));
    let n_test = (config.test_fraction * n_traj as f64).round() as usize;
    let n_val = (config.val_fraction * n_traj as f64).round() as usize;
    let mut split_of = vec![Split::Train; n_traj];
    for (rank, &t) in order.iter().enumerate() {
        split_of[t] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }

    fs::create_dir_all(out.join("clips")).map_err(|e| Error::io(out, e))?;
    let mut clips = Vec::with_capacity(config.clips);
    for t in 0..n_traj {
        let traj_seed = derive_seed(seed, &[0x7EA, t as u64]);
        let first = t * config.clips_per_trajectory;
        let count = config.clips_per_trajectory.min(config.clips - first);
        let len = WARMUP_FRAMES + count * config.clip_len;
        let states = sample_trajectory(&scene, &config.trajectory, len, traj_seed)?;
        for k in 0..count {
            let id = first + k;
            let start = k * config.clip_len;
            let window = &states[WARMUP_FRAMES + start..WARMUP_FRAMES + start + config.clip_len];
            let poses = window
                .iter()
                .map(skeleton_to_body_pose)
                .collect::<Result<Vec<BodyPoseFrame>>>()?;
            let mut frames = Vec::with_capacity(poses.len());
            let mut masks = Vec::with_capacity(poses.len());
            for p in &poses {
                let (img, mask) = render_pose(&scene, p, config.width, config.height)?;
                frames.push(img);
                masks.push(mask);
            }
            let seq = PoseSequence::new(poses, config.trajectory.dt)?;
            let dir = format!("clips/{id:05}");
            let path = out.join(&dir);
            fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            write_file(&path.join("frames.bin"), &frames_to_bytes(&frames))?;
            let mask_bytes: Vec<u8> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
            write_file(&path.join("masks.bin"), &mask_bytes)?;
            write_file(&path.join("poses.jsonl"), write_pose_jsonl(&seq).as_bytes())?;
            clips.push(ClipEntry {
                id,
                trajectory: t,
                trajectory_seed: traj_seed,
                start,
                split: split_of[t],
                dir,
            });
        }
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        seed,
        config: config.clone(),
        scene,
        clips,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(out.join("manifest.json"), e))?;
    write_file(&out.join("manifest.json"), text.as_bytes())?;
    log::info!("wrote {} clips to {}", manifest.clips.len(), out.display());
    Ok(manifest)
}

/// Read access to a generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!(
                    "format version {} (expected {DATASET_FORMAT_VERSION})",
                    manifest.format_version
                ),
            ));
        }
        manifest.scene.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn scene(&self) -> &Scene {
        &self.manifest.scene
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.manifest.config
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.manifest
            .clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    pub fn entry(&self, id: usize) -> Result<&ClipEntry> {
        self.manifest
            .clips
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Data(format!("no clip {id} in {}", self.root.display())))
    }

    pub fn load_clip(&self, id: usize) -> Result<ClipRecord> {
        let entry = self.entry(id)?;
        let dir = self.root.join(&entry.dir);
        let cfg = &self.manifest.config;
        let frames = frames_from_bytes(&read_file(&dir.join("frames.bin"))?, cfg.width, cfg.height)?;
        let masks = masks_from_bytes(&read_file(&dir.join("masks.bin"))?, cfg.width, cfg.height)?;
        let pose_path = dir.join("poses.jsonl");
        let text = fs::read_to_string(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
        let poses = read_pose_jsonl(&text)?;
        let clip = ClipRecord {
            frames,
            masks,
            poses,
            context_frames: cfg.context_frames,
        };
        if clip.frames.len() != cfg.clip_len {
            return Err(Error::format(
                &dir,
                format!("{} frames, expected {}", clip.frames.len(), cfg.clip_len),
            ));
        }
        clip.validate()?;
        Ok(clip)
    }

    /// Re-renders every frame of a clip from its stored poses and reports
    /// whether images and masks match bit for bit.
    pub fn verify_clip(&self, id: usize) -> Result<bool> {
        let clip = self.load_clip(id)?;
        let cfg = &self.manifest.config;
        for ((pose, frame), mask) in clip.poses.frames().iter().zip(&clip.frames).zip(&clip.masks) {
            let (img, m) = render_pose(self.scene(), pose, cfg.width, cfg.height)?;
            if &img != frame || &m != mask {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::default()
    }
}
