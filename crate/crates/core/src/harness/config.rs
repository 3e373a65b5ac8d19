use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::variant::{Mechanism, PoseVariant};
use crate::dit::{latent_frames_for, DiTConfig};
use crate::edm::{GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numeric::AdamConfig;
use crate::world::{DatasetConfig, Split, Tokenizer};

/// Architecture knobs; the latent geometry comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub r: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 128,
            r: 32,
            heads: 4,
            depth: 4,
            patch_size: 2,
            time_embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_size: 16,
            iterations: 3000,
        }
    }
}

impl OptimizerSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    /// Evaluate only the first clips of the split.
    pub max_clips: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_clips: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: PoseVariant,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

fn default_variant() -> PoseVariant {
    PoseVariant::FullBody
}

fn default_mechanism() -> Mechanism {
    Mechanism::Both
}

fn default_checkpoint_every() -> usize {
    500
}

impl RunConfig {
    /// Config with every default and the given dataset.
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            out_dir: default_out_dir(),
            seed: 0,
            variant: default_variant(),
            mechanism: default_mechanism(),
            checkpoint_every: default_checkpoint_every(),
            model: ModelSection::default(),
            schedule: NoiseSchedule::default(),
            guidance: GuidanceConfig::default(),
            optimizer: OptimizerSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::Config("dataset: path is empty".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir: path is empty".into()));
        }
        let m = &self.model;
        if m.r >= m.d {
            return Err(Error::Config(format!(
                "model.r: modulation rank must satisfy r < d (r = {}, d = {})",
                m.r, m.d
            )));
        }
        let o = &self.optimizer;
        if o.iterations == 0 {
            return Err(Error::Config("optimizer.iterations: must be positive".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size: must be positive".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config("optimizer.lr: must be positive".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(
                "optimizer: need beta1, beta2 in [0, 1) and eps > 0".into(),
            ));
        }
        self.schedule.validate()?;
        self.guidance.validate()?;
        Ok(())
    }

    /// Network configuration for clips of `data`.
    pub fn dit_config(&self, data: &DatasetConfig) -> Result<DiTConfig> {
        let tok = Tokenizer::default();
        if !data.width.is_multiple_of(tok.spatial_factor) || !data.height.is_multiple_of(tok.spatial_factor) {
            return Err(Error::Config(format!(
                "frame size {}x{} is not a multiple of the tokenizer factor {}",
                data.width, data.height, tok.spatial_factor
            )));
        }
        let flags = self.variant.flags(self.mechanism);
        let m = &self.model;
        let cfg = DiTConfig {
            d: m.d,
            r: m.r,
            heads: m.heads,
            depth: m.depth,
            patch_size: m.patch_size,
            latent_frames: latent_frames_for(data.clip_len),
            latent_height: data.height / tok.spatial_factor,
            latent_width: data.width / tok.spatial_factor,
            latent_channels: tok.latent_channels(),
            time_embed_dim: m.time_embed_dim,
            pose_token_dim: m.d,
            future_frames: data.future_frames(),
            past_frames: data.context_frames,
            adaln_pose: flags.adaln,
            cross_attn_pose: flags.cross_attn,
            init_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoint")
    }
}

/// Reads a TOML run config. Relative paths resolve against the file's
/// directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    if cfg.dataset.is_relative() {
        cfg.dataset = base.join(&cfg.dataset);
    }
    if cfg.out_dir.is_relative() {
        cfg.out_dir = base.join(&cfg.out_dir);
    }
    cfg.validate().map_err(|e| Error::format(path, e))?;
    Ok(cfg)
}
