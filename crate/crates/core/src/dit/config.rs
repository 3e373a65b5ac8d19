use std::path::Path;

use serde::{Deserialize, Serialize};

use super::latent::{LatentGeometry, Patchifier};
use crate::error::{Error, Result};
use crate::se3::FRAME_WIDTH;

/// Frames folded into one latent frame (the first latent holds frame 0 alone).
pub const TEMPORAL_FACTOR: usize = 4;

/// Latent frames produced for `frames` input frames.
pub fn latent_frames_for(frames: usize) -> usize {
    1 + frames.saturating_sub(1) / TEMPORAL_FACTOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub d: usize,
    /// Modulation bottleneck rank, `r < d`.
    pub r: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    /// Width of the sinusoidal noise-level code.
    pub time_embed_dim: usize,
    /// Pose token width; must equal `d`.
    pub pose_token_dim: usize,
    pub future_frames: usize,
    pub past_frames: usize,
    pub adaln_pose: bool,
    pub cross_attn_pose: bool,
    pub init_seed: u64,
}

impl DiTConfig {
    /// Desk-scale defaults for 48×48 clips of 13 + 32 frames.
    pub fn desk() -> Self {
        Self {
            d: 128,
            r: 32,
            heads: 4,
            depth: 4,
            patch_size: 2,
            latent_frames: 12,
            latent_height: 12,
            latent_width: 12,
            latent_channels: 48 * TEMPORAL_FACTOR,
            time_embed_dim: 128,
            pose_token_dim: 128,
            future_frames: 32,
            past_frames: 13,
            adaln_pose: true,
            cross_attn_pose: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        for (name, v) in [
            ("d", self.d),
            ("r", self.r),
            ("heads", self.heads),
            ("depth", self.depth),
            ("patch_size", self.patch_size),
            ("latent_frames", self.latent_frames),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("latent_channels", self.latent_channels),
            ("time_embed_dim", self.time_embed_dim),
            ("future_frames", self.future_frames),
            ("past_frames", self.past_frames),
        ] {
            if v == 0 {
                return err(name, "must be positive".into());
            }
        }
        if self.r >= self.d {
            return err(
                "r",
                format!("modulation rank must satisfy r < d (r = {}, d = {})", self.r, self.d),
            );
        }
        if !self.d.is_multiple_of(self.heads) {
            return err(
                "heads",
                format!("d = {} is not divisible by {} heads", self.d, self.heads),
            );
        }
        if !self.d.is_multiple_of(2) || !self.time_embed_dim.is_multiple_of(2) {
            return err("d", "d and time_embed_dim must be even".into());
        }
        if self.pose_token_dim != self.d {
            return err("pose_token_dim", format!("must equal d = {}", self.d));
        }
        if !self.latent_height.is_multiple_of(self.patch_size) || !self.latent_width.is_multiple_of(self.patch_size) {
            return err("patch_size", "must divide the latent height and width".into());
        }
        if !(self.past_frames - 1).is_multiple_of(TEMPORAL_FACTOR)
            || !self.future_frames.is_multiple_of(TEMPORAL_FACTOR)
        {
            return err(
                "past_frames",
                format!("need past ≡ 1 and future ≡ 0 (mod {TEMPORAL_FACTOR})"),
            );
        }
        let expect = latent_frames_for(self.past_frames + self.future_frames);
        if self.latent_frames != expect {
            return err(
                "latent_frames",
                format!(
                    "{} past + {} future frames give {expect} latent frames",
                    self.past_frames, self.future_frames
                ),
            );
        }
        Ok(())
    }

    pub fn context_latents(&self) -> usize {
        latent_frames_for(self.past_frames)
    }

    pub fn geometry(&self) -> LatentGeometry {
        LatentGeometry {
            frames: self.latent_frames,
            channels: self.latent_channels,
            height: self.latent_height,
            width: self.latent_width,
            context_frames: self.context_latents(),
        }
    }

    pub fn patchifier(&self) -> Patchifier {
        Patchifier {
            frames: self.latent_frames,
            channels: self.latent_channels,
            height: self.latent_height,
            width: self.latent_width,
            patch: self.patch_size,
        }
    }

    pub fn control_len(&self) -> usize {
        self.future_frames * FRAME_WIDTH
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
