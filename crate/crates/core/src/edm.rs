//! Noise perturbation, preconditioning, training loss, guidance and the
//! deterministic Heun sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dit::{DenoiserModel, ForwardBatch, LatentVideo, PoseFlags};
use crate::error::{Error, Result, TensorError};
use crate::numeric::{normal_vec, rng_from, Graph, Tensor, Var};
use crate::se3::ControlTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub sigma_data: f64,
    /// Mean of ln σ at training time.
    pub p_mean: f64,
    /// Std of ln σ at training time.
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 18,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config("schedule: need 0 < sigma_min < sigma_max".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("schedule: steps must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.sigma_data > 0.0 && self.p_std >= 0.0) {
            return Err(Error::Config("schedule: rho, sigma_data must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub weight: f64,
    pub context_dropout_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weight: 2.0,
            context_dropout_prob: 0.2,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::Config("guidance: weight must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.context_dropout_prob) {
            return Err(Error::Config(
                "guidance: context_dropout_prob must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Precond {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Precond {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

/// `w(σ) = (σ² + σ_d²) / (σ σ_d)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Karras ρ-ladder with a trailing 0.
pub fn sigma_ladder(s: &NoiseSchedule) -> Vec<f64> {
    let (a, b) = (s.sigma_max.powf(1.0 / s.rho), s.sigma_min.powf(1.0 / s.rho));
    let mut out: Vec<f64> = if s.steps == 1 {
        vec![s.sigma_max]
    } else {
        (0..s.steps)
            .map(|i| (a + i as f64 / (s.steps - 1) as f64 * (b - a)).powf(s.rho))
            .collect()
    };
    out.push(0.0);
    out
}

/// `z = z0 + σ ε` on generated slots; context slots are copied untouched.
pub fn perturb(z0: &LatentVideo, sigma: f64, seed: u64) -> Result<LatentVideo> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(z0.clone());
    }
    let mut rng = rng_from(seed, &[0xe5]);
    let eps = normal_vec(&mut rng, z0.geometry().generated_len());
    let noisy: Vec<f64> = z0.generated().iter().zip(&eps).map(|(z, e)| z + sigma * e).collect();
    z0.with_generated(&noisy)
}

/// Per-clip flags: `true` means the context is replaced by the null embedding.
pub fn context_dropout(clips: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = rng_from(seed, &[0xd0]);
    (0..clips).map(|_| rng.gen::<f64>() < p).collect()
}

/// Noise level and noise draw for one clip of a training batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub sigma: f64,
    pub eps: Vec<f64>,
}

/// ln σ ~ N(p_mean, p_std²) and ε ~ N(0, I), one pair per clip.
pub fn draw_noise(schedule: &NoiseSchedule, clips: usize, len: usize, seed: u64) -> Vec<NoiseDraw> {
    (0..clips)
        .map(|c| {
            let mut rng = rng_from(seed, &[0x51, c as u64]);
            let n = normal_vec(&mut rng, 1)[0];
            let sigma = (schedule.p_mean + schedule.p_std * n).exp();
            NoiseDraw {
                sigma,
                eps: normal_vec(&mut rng, len),
            }
        })
        .collect()
}

/// Conditioning shared by every denoiser call within one generation.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    /// Full-geometry latent whose context slots hold the past latents.
    pub past: &'a LatentVideo,
    pub control: &'a ControlTensor,
}

/// The preconditioned denoiser `D(z; σ, c)` over generated slots.
pub trait Denoiser {
    fn denoise(&self, generated: &[f64], sigma: f64, cond: &Condition, null_context: bool) -> Result<Vec<f64>>;

    /// `(D_cond, D_uncond)`; implementations may evaluate both in one batch.
    fn denoise_pair(&self, generated: &[f64], sigma: f64, cond: &Condition) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.denoise(generated, sigma, cond, false)?,
            self.denoise(generated, sigma, cond, true)?,
        ))
    }
}

/// `D_uncond + w (D_cond − D_uncond)`; w = 1 and w = 0 return one branch as is.
pub fn cfg_denoise<D: Denoiser + ?Sized>(
    model: &D,
    generated: &[f64],
    sigma: f64,
    cond: &Condition,
    weight: f64,
) -> Result<Vec<f64>> {
    if weight == 1.0 {
        return model.denoise(generated, sigma, cond, false);
    }
    if weight == 0.0 {
        return model.denoise(generated, sigma, cond, true);
    }
    let (c, u) = model.denoise_pair(generated, sigma, cond)?;
    Ok(u.iter().zip(&c).map(|(u, c)| u + weight * (c - u)).collect())
}

/// Deterministic Heun integration down the σ ladder; the final step to σ = 0
/// is a plain Euler step. Returns the full video with the context copied in.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    cond: &Condition,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<LatentVideo> {
    let ladder = sigma_ladder(schedule);
    let n = cond.past.geometry().generated_len();
    let mut rng = rng_from(seed, &[0x5a]);
    let mut x: Vec<f64> = normal_vec(&mut rng, n).into_iter().map(|e| e * ladder[0]).collect();
    for w in ladder.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        let d0 = cfg_denoise(model, &x, s0, cond, guidance.weight)?;
        let slope0: Vec<f64> = x.iter().zip(&d0).map(|(x, d)| (x - d) / s0).collect();
        let euler: Vec<f64> = x.iter().zip(&slope0).map(|(x, s)| x + (s1 - s0) * s).collect();
        if s1 == 0.0 {
            x = euler;
            continue;
        }
        let d1 = cfg_denoise(model, &euler, s1, cond, guidance.weight)?;
        x = x
            .iter()
            .zip(&slope0)
            .zip(euler.iter().zip(&d1))
            .map(|((x, s0v), (e, d))| x + (s1 - s0) * 0.5 * (s0v + (e - d) / s1))
            .collect();
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Tensor(TensorError::NonFinite { op: "sample" }));
    }
    cond.past.with_generated(&x)
}

/// One clip of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub clean: &'a LatentVideo,
    pub control: &'a ControlTensor,
    pub null_context: bool,
}

/// Loss value for an arbitrary denoiser; same noise draws as the model path.
pub fn training_loss_value<D: Denoiser + ?Sized>(
    model: &D,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let n = batch[0].clean.geometry().generated_len();
    let draws = draw_noise(schedule, batch.len(), n, seed);
    let mut total = 0.0;
    for (ex, dr) in batch.iter().zip(&draws) {
        let z: Vec<f64> = ex
            .clean
            .generated()
            .iter()
            .zip(&dr.eps)
            .map(|(z, e)| z + dr.sigma * e)
            .collect();
        let cond = Condition {
            past: ex.clean,
            control: ex.control,
        };
        let d = model.denoise(&z, dr.sigma, &cond, ex.null_context)?;
        let sq: f64 = d.iter().zip(ex.clean.generated()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += loss_weight(dr.sigma, schedule.sigma_data) * sq / n as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Token tensor `[L, P]` for a latent whose generated slots are replaced by `generated`.
fn tokens_for(model: &DenoiserModel, past: &LatentVideo, generated: &[f64]) -> Vec<f64> {
    let geo = past.geometry();
    let pf = model.config.patchifier();
    let mut tokens = pf.patchify(geo.context_frames, past.context());
    tokens.extend(pf.patchify(geo.frames - geo.context_frames, generated));
    tokens
}

/// Differentiable training loss of the DiT on a batch:
/// mean over clips of `w(σ) · mean((D(z; σ) − z0)²)` on generated slots.
pub fn training_loss(
    g: &mut Graph,
    model: &DenoiserModel,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    seed: u64,
    flags: PoseFlags,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let geo = model.config.geometry();
    let pf = model.config.patchifier();
    let n = geo.generated_len();
    let draws = draw_noise(schedule, batch.len(), n, seed);
    let b = batch.len();
    let lg = (geo.frames - geo.context_frames) * pf.tokens_per_frame();
    let p = pf.token_dim();
    let mut tokens = Vec::with_capacity(b * geo.frames * pf.tokens_per_frame() * p);
    let mut c_noise = Vec::with_capacity(b);
    let mut controls = Vec::with_capacity(b * model.config.control_len());
    let mut nulls = Vec::with_capacity(b);
    let mut c_out = Vec::with_capacity(b * n);
    let mut resid = Vec::with_capacity(b * n);
    let mut weights = Vec::with_capacity(b * n);
    for (ex, dr) in batch.iter().zip(&draws) {
        if ex.clean.geometry() != geo || ex.control.as_slice().len() != model.config.control_len() {
            return Err(Error::Geometry(
                "training example does not match the model geometry".into(),
            ));
        }
        let pc = precond(dr.sigma, schedule.sigma_data);
        let z: Vec<f64> = ex
            .clean
            .generated()
            .iter()
            .zip(&dr.eps)
            .map(|(z, e)| z + dr.sigma * e)
            .collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * pc.c_in).collect();
        tokens.extend(tokens_for(model, ex.clean, &scaled));
        c_noise.push(pc.c_noise);
        controls.extend_from_slice(ex.control.as_slice());
        nulls.push(ex.null_context);
        // D = c_skip z + c_out F; residual against z0 in token order
        let zt = pf.patchify(geo.frames - geo.context_frames, &z);
        let z0t = pf.patchify(geo.frames - geo.context_frames, ex.clean.generated());
        resid.extend(zt.iter().zip(&z0t).map(|(z, z0)| pc.c_skip * z - z0));
        c_out.extend(std::iter::repeat_n(pc.c_out, n));
        let w = loss_weight(dr.sigma, schedule.sigma_data) / (n as f64 * b as f64);
        weights.extend(std::iter::repeat_n(w, n));
    }
    let fb = ForwardBatch {
        tokens: &tokens,
        c_noise: &c_noise,
        controls: &controls,
        null_context: &nulls,
    };
    let f = model.forward(g, &fb, flags)?;
    let shape = [b, lg, p];
    let c_out = g.constant(Tensor::new(&shape, c_out)?);
    let resid = g.constant(Tensor::new(&shape, resid)?);
    let weights = g.constant(Tensor::new(&shape, weights)?);
    let scaled = g.mul(f, c_out)?;
    let diff = g.add(scaled, resid)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weights)?;
    Ok(g.sum(weighted)?)
}

/// The DiT as a [`Denoiser`], with the pose pathways chosen by `flags`.
#[derive(Debug, Clone, Copy)]
pub struct ModelDenoiser<'a> {
    pub model: &'a DenoiserModel,
    pub sigma_data: f64,
    pub flags: PoseFlags,
}

impl<'a> ModelDenoiser<'a> {
    pub fn new(model: &'a DenoiserModel, sigma_data: f64) -> Self {
        Self {
            model,
            sigma_data,
            flags: model.flags(),
        }
    }

    fn run(&self, generated: &[f64], sigma: f64, cond: &Condition, nulls: &[bool]) -> Result<Vec<Vec<f64>>> {
        let geo = self.model.config.geometry();
        if cond.past.geometry() != geo || generated.len() != geo.generated_len() {
            return Err(Error::Geometry(
                "denoiser input does not match the model geometry".into(),
            ));
        }
        if cond.control.as_slice().len() != self.model.config.control_len() {
            return Err(Error::Geometry(format!(
                "control has {} frames, model expects {}",
                cond.control.frames(),
                self.model.config.future_frames
            )));
        }
        let pc = precond(sigma, self.sigma_data);
        let scaled: Vec<f64> = generated.iter().map(|v| v * pc.c_in).collect();
        let one = tokens_for(self.model, cond.past, &scaled);
        let b = nulls.len();
        let tokens: Vec<f64> = std::iter::repeat_n(one.iter().copied(), b).flatten().collect();
        let controls: Vec<f64> = std::iter::repeat_n(cond.control.as_slice().iter().copied(), b)
            .flatten()
            .collect();
        let c_noise = vec![pc.c_noise; b];
        let mut g = Graph::inference();
        let fb = ForwardBatch {
            tokens: &tokens,
            c_noise: &c_noise,
            controls: &controls,
            null_context: nulls,
        };
        let f = self.model.forward(&mut g, &fb, self.flags)?;
        let pf = self.model.config.patchifier();
        let gen_frames = geo.frames - geo.context_frames;
        let n = geo.generated_len();
        Ok(g.value(f)
            .data()
            .chunks_exact(n)
            .map(|tok| {
                let f = pf.unpatchify(gen_frames, tok);
                generated
                    .iter()
                    .zip(&f)
                    .map(|(z, f)| pc.c_skip * z + pc.c_out * f)
                    .collect()
            })
            .collect())
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn denoise(&self, generated: &[f64], sigma: f64, cond: &Condition, null_context: bool) -> Result<Vec<f64>> {
        Ok(self.run(generated, sigma, cond, &[null_context])?.remove(0))
    }

    fn denoise_pair(&self, generated: &[f64], sigma: f64, cond: &Condition) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut out = self.run(generated, sigma, cond, &[false, true])?;
        let u = out.pop().expect("two outputs");
        let c = out.pop().expect("two outputs");
        Ok((c, u))
    }
}
