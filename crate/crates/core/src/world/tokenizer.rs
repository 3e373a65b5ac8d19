use serde::{Deserialize, Serialize};

use crate::dit::{latent_frames_for, LatentGeometry, LatentVideo, TEMPORAL_FACTOR};
use crate::error::{Error, Result};

use super::image::Image;

/// Invertible stand-in for a learned video encoder: the first frame forms a
/// latent frame on its own (replicated to fill the temporal slots), later
/// frames are grouped four at a time; each frame is folded space-to-depth
/// and normalized by `(x - mean) * scale`. Mean and scale are dyadic, so on
/// pixel-grid inputs both directions are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tokenizer {
    pub spatial_factor: usize,
    pub mean: [f64; 3],
    pub scale: f64,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            spatial_factor: 4,
            mean: [0.5; 3],
            scale: 2.0,
        }
    }
}

impl Tokenizer {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_factor == 0 {
            return Err(Error::Config("spatial factor must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.log2().fract() == 0.0) {
            return Err(Error::Config(format!(
                "tokenizer scale {} is not a power of two",
                self.scale
            )));
        }
        if self.mean.iter().any(|m| (m * 1024.0).fract() != 0.0) {
            return Err(Error::Config("tokenizer mean must lie on the 1/1024 grid".into()));
        }
        Ok(())
    }

    /// Channels of one space-to-depth folded frame.
    pub fn frame_channels(&self) -> usize {
        3 * self.spatial_factor * self.spatial_factor
    }

    pub fn latent_channels(&self) -> usize {
        TEMPORAL_FACTOR * self.frame_channels()
    }

    /// Folds one frame into `3·f² × H/f × W/f`, channel order `(color, dy, dx)`.
    pub fn space_to_depth(&self, img: &Image) -> Result<(usize, usize, usize, Vec<f64>)> {
        let f = self.spatial_factor;
        let (w, h) = (img.width(), img.height());
        if w % f != 0 || h % f != 0 {
            return Err(Error::Geometry(format!("{w}x{h} frame not divisible by factor {f}")));
        }
        let (lh, lw) = (h / f, w / f);
        let ch = self.frame_channels();
        let mut out = vec![0.0; ch * lh * lw];
        for y in 0..h {
            for x in 0..w {
                let px = img.pixel(x, y);
                for (c, v) in px.iter().enumerate() {
                    let k = (c * f + y % f) * f + x % f;
                    out[(k * lh + y / f) * lw + x / f] = (*v as f64 - self.mean[c]) * self.scale;
                }
            }
        }
        Ok((ch, lh, lw, out))
    }

    fn depth_to_space(&self, data: &[f64], lh: usize, lw: usize) -> Image {
        let f = self.spatial_factor;
        let (h, w) = (lh * f, lw * f);
        let mut img = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0f32; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let k = (c * f + y % f) * f + x % f;
                    let v = data[(k * lh + y / f) * lw + x / f] / self.scale + self.mean[c];
                    *p = v.clamp(0.0, 1.0) as f32;
                }
                img.set_pixel(x, y, px);
            }
        }
        img
    }

    /// Encodes `1 + 4k` frames into `1 + k` latent frames, of which the
    /// latents covering the first `context_frames` frames are context.
    pub fn tokenize(&self, frames: &[Image], context_frames: usize) -> Result<LatentVideo> {
        self.validate()?;
        let n = frames.len();
        if n == 0 || !(n - 1).is_multiple_of(TEMPORAL_FACTOR) {
            return Err(Error::Geometry(format!(
                "{n} frames: count must be 1 mod {TEMPORAL_FACTOR}"
            )));
        }
        if context_frames == 0 || !(context_frames - 1).is_multiple_of(TEMPORAL_FACTOR) || context_frames >= n {
            return Err(Error::Geometry(format!("{context_frames} context frames out of {n}")));
        }
        let first = &frames[0];
        if frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::Geometry("frames differ in size".into()));
        }
        let folded = frames
            .iter()
            .map(|f| self.space_to_depth(f).map(|r| r.3))
            .collect::<Result<Vec<_>>>()?;
        let f = self.spatial_factor;
        let (lh, lw) = (first.height() / f, first.width() / f);
        let frame_len = self.frame_channels() * lh * lw;
        let latents = latent_frames_for(n);
        let mut data = Vec::with_capacity(latents * TEMPORAL_FACTOR * frame_len);
        for _ in 0..TEMPORAL_FACTOR {
            data.extend_from_slice(&folded[0]);
        }
        for group in folded[1..].chunks(TEMPORAL_FACTOR) {
            for fr in group {
                data.extend_from_slice(fr);
            }
        }
        let geometry = LatentGeometry {
            frames: latents,
            channels: self.latent_channels(),
            height: lh,
            width: lw,
            context_frames: latent_frames_for(context_frames),
        };
        LatentVideo::new(geometry, data)
    }

    /// Inverse of [`Tokenizer::tokenize`]. The replicated copies of frame 0
    /// beyond the first are ignored; values are clamped to `[0, 1]`.
    pub fn detokenize(&self, latents: &LatentVideo) -> Result<Vec<Image>> {
        let g = latents.geometry();
        if g.channels != self.latent_channels() {
            return Err(Error::Geometry(format!(
                "latent has {} channels, tokenizer expects {}",
                g.channels,
                self.latent_channels()
            )));
        }
        let frame_len = self.frame_channels() * g.height * g.width;
        let data = latents.data();
        let mut out = Vec::with_capacity(1 + (g.frames - 1) * TEMPORAL_FACTOR);
        out.push(self.depth_to_space(&data[..frame_len], g.height, g.width));
        for t in 1..g.frames {
            for k in 0..TEMPORAL_FACTOR {
                let start = (t * TEMPORAL_FACTOR + k) * frame_len;
                out.push(self.depth_to_space(&data[start..start + frame_len], g.height, g.width));
            }
        }
        Ok(out)
    }
}
