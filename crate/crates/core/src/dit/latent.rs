use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent video stored `T × C × H × W`; the first `context_frames` time
/// slots hold (clean) past latents, the rest are generated.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    geometry: LatentGeometry,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentGeometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub context_frames: usize,
}

impl LatentGeometry {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_len(&self) -> usize {
        self.context_frames * self.frame_len()
    }

    pub fn generated_len(&self) -> usize {
        (self.frames - self.context_frames) * self.frame_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Geometry(format!("zero extent in {self:?}")));
        }
        if self.context_frames >= self.frames {
            return Err(Error::Geometry(format!(
                "{} context frames leave nothing to generate out of {}",
                self.context_frames, self.frames
            )));
        }
        Ok(())
    }
}

impl LatentVideo {
    pub fn new(geometry: LatentGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!("{} values for {:?}", data.len(), geometry)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("latent contains non-finite values".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: LatentGeometry) -> Result<Self> {
        Self::new(geometry, vec![0.0; geometry.len()])
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn context(&self) -> &[f64] {
        &self.data[..self.geometry.context_len()]
    }

    pub fn generated(&self) -> &[f64] {
        &self.data[self.geometry.context_len()..]
    }

    pub fn generated_mut(&mut self) -> &mut [f64] {
        let c = self.geometry.context_len();
        &mut self.data[c..]
    }

    /// Same context, new generated slots.
    pub fn with_generated(&self, generated: &[f64]) -> Result<Self> {
        if generated.len() != self.geometry.generated_len() {
            return Err(Error::Geometry(format!(
                "{} generated values, expected {}",
                generated.len(),
                self.geometry.generated_len()
            )));
        }
        let mut data = self.context().to_vec();
        data.extend_from_slice(generated);
        Self::new(self.geometry, data)
    }
}

/// Non-overlapping `p × p` spatial patches. Token order is (t, row, col); each
/// token lists its values in (channel, dy, dx) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patchifier {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Patchifier {
    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// `frames` consecutive latent frames to `[frames * tokens_per_frame, token_dim]`.
    pub fn patchify(&self, frames: usize, data: &[f64]) -> Vec<f64> {
        let (p, h, w, c) = (self.patch, self.height, self.width, self.channels);
        let mut out = Vec::with_capacity(data.len());
        for t in 0..frames {
            for i in 0..self.rows() {
                for j in 0..self.cols() {
                    for ch in 0..c {
                        for dy in 0..p {
                            let base = ((t * c + ch) * h + i * p + dy) * w + j * p;
                            out.extend_from_slice(&data[base..base + p]);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn unpatchify(&self, frames: usize, tokens: &[f64]) -> Vec<f64> {
        let (p, h, w, c) = (self.patch, self.height, self.width, self.channels);
        let mut out = vec![0.0; tokens.len()];
        let mut k = 0;
        for t in 0..frames {
            for i in 0..self.rows() {
                for j in 0..self.cols() {
                    for ch in 0..c {
                        for dy in 0..p {
                            let base = ((t * c + ch) * h + i * p + dy) * w + j * p;
                            out[base..base + p].copy_from_slice(&tokens[k..k + p]);
                            k += p;
                        }
                    }
                }
            }
        }
        out
    }
}
