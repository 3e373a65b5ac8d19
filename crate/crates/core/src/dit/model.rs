//! Diffusion transformer with pose control through global AdaLN modulation
//! and per-frame pose-token cross-attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DiTConfig;
use crate::error::TensorError;
use crate::numeric::nn::{attention, linear};
use crate::numeric::{normal_vec, sinusoidal_embedding, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::se3::FRAME_WIDTH;

const LN_EPS: f64 = 1e-5;

/// Which pose pathways a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseFlags {
    pub adaln: bool,
    pub cross_attn: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    SelfAttn,
    CrossAttn,
    Mlp,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::SelfAttn, Component::CrossAttn, Component::Mlp];

    fn tag(self) -> &'static str {
        match self {
            Component::SelfAttn => "self",
            Component::CrossAttn => "cross",
            Component::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TwoLayer {
    pub first: Dense,
    pub second: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

/// Low-rank modulation factors for one component. Stored so that the
/// product is `SiLU(e) · w_m2 · w_m1`, i.e. the transposed column form.
#[derive(Debug, Clone, Copy)]
pub struct ModWeights {
    /// `[r, 3d]`
    pub w_m1: ParamId,
    /// `[d, r]`
    pub w_m2: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub modulation: [ModWeights; 3],
    pub self_attn: AttnWeights,
    pub cross_attn: AttnWeights,
    pub mlp: TwoLayer,
}

/// Shift, scale and gate for one component, each broadcastable over tokens.
#[derive(Debug, Clone, Copy)]
pub struct ModulationTriple {
    pub beta: Var,
    pub gamma: Var,
    pub gate: Var,
}

/// Parameters of the pose-conditioning pathways.
#[derive(Debug, Clone, Copy)]
pub struct PoseConditioner {
    pub g_e: TwoLayer,
    pub g_m: TwoLayer,
    pub f: TwoLayer,
    pub time: Dense,
    pub w_p: Dense,
}

/// Network weights plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DiTConfig,
    pub store: ParameterStore,
    pub patch_in: Dense,
    pub pos_t: ParamId,
    pub pos_h: ParamId,
    pub pos_w: ParamId,
    pub null_context: ParamId,
    pub cond: PoseConditioner,
    pub blocks: Vec<BlockWeights>,
    pub out: Dense,
}

/// One batch for a forward pass. `tokens` is `[B, L, token_dim]`: context
/// tokens hold clean latents, generated tokens the preconditioned input.
#[derive(Debug, Clone, Copy)]
pub struct ForwardBatch<'a> {
    pub tokens: &'a [f64],
    pub c_noise: &'a [f64],
    /// `[B, M · 138]`
    pub controls: &'a [f64],
    pub null_context: &'a [bool],
}

impl ForwardBatch<'_> {
    pub fn batch(&self) -> usize {
        self.c_noise.len()
    }
}

enum Init {
    Zero,
    Normal(f64),
}

struct Builder {
    store: ParameterStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; n],
            Init::Normal(std) => normal_vec(&mut self.rng, n).into_iter().map(|x| x * std).collect(),
        };
        let t = Tensor::new(shape, data).expect("finite init");
        self.store.add(name, t).expect("unique parameter names")
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Dense {
        let init = if zero {
            Init::Zero
        } else {
            Init::Normal(1.0 / (fan_in as f64).sqrt())
        };
        Dense {
            w: self.tensor(format!("{name}.w"), &[fan_in, fan_out], init),
            b: self.tensor(format!("{name}.b"), &[fan_out], Init::Zero),
        }
    }

    fn two_layer(&mut self, name: &str, i: usize, h: usize, o: usize, zero_last: bool) -> TwoLayer {
        TwoLayer {
            first: self.dense(&format!("{name}.0"), i, h, false),
            second: self.dense(&format!("{name}.1"), h, o, zero_last),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnWeights {
        AttnWeights {
            q: self.dense(&format!("{name}.q"), d, d, false),
            k: self.dense(&format!("{name}.k"), d, d, false),
            v: self.dense(&format!("{name}.v"), d, d, false),
            o: self.dense(&format!("{name}.o"), d, d, false),
        }
    }
}

fn dense(g: &mut Graph, s: &ParameterStore, x: Var, p: Dense) -> Result<Var, TensorError> {
    let w = g.param(s, p.w);
    let b = g.param(s, p.b);
    linear(g, x, w, Some(b))
}

fn two_layer(g: &mut Graph, s: &ParameterStore, x: Var, p: TwoLayer) -> Result<Var, TensorError> {
    let h = dense(g, s, x, p.first)?;
    let h = g.silu(h)?;
    dense(g, s, h, p.second)
}

/// `LN(u) ⊙ (1 + γ) + β`, with `β`, `γ` broadcast over leading dimensions.
pub fn adaln(g: &mut Graph, u: Var, beta: Var, gamma: Var) -> Result<Var, TensorError> {
    let n = g.layer_norm(u, LN_EPS)?;
    let scale = g.offset(gamma, 1.0)?;
    let y = g.mul(n, scale)?;
    g.add(y, beta)
}

/// Sinusoidal frame-index encoding added to pose tokens, `[M, width]`.
pub fn pose_positional_encoding(frames: usize, width: usize) -> Tensor {
    let data = (0..frames)
        .flat_map(|m| sinusoidal_embedding(m as f64, width))
        .collect();
    Tensor::new(&[frames, width], data).expect("finite encoding")
}

impl DenoiserModel {
    pub fn new(config: DiTConfig) -> crate::Result<Self> {
        config.validate()?;
        let d = config.d;
        let pf = config.patchifier();
        let mut b = Builder {
            store: ParameterStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let patch_in = b.dense("patch_in", pf.token_dim(), d, false);
        let pos_t = b.tensor("pos.t".into(), &[config.latent_frames, d], Init::Normal(0.1));
        let pos_h = b.tensor("pos.h".into(), &[pf.rows(), d], Init::Normal(0.1));
        let pos_w = b.tensor("pos.w".into(), &[pf.cols(), d], Init::Normal(0.1));
        let null_context = b.tensor("null_context".into(), &[d], Init::Normal(0.02));
        let de = config.time_embed_dim;
        let cond = PoseConditioner {
            time: b.dense("time", de, d, false),
            f: b.two_layer("f", de, d, 3 * d, true),
            g_e: b.two_layer("g_e", config.control_len(), d, d, false),
            g_m: b.two_layer("g_m", config.control_len(), d, 3 * d, true),
            w_p: b.dense("pose_token", FRAME_WIDTH, config.pose_token_dim, false),
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let modulation = Component::ALL.map(|k| ModWeights {
                w_m1: b.tensor(format!("block{i}.{}.w_m1", k.tag()), &[config.r, 3 * d], Init::Zero),
                w_m2: b.tensor(
                    format!("block{i}.{}.w_m2", k.tag()),
                    &[d, config.r],
                    Init::Normal(1.0 / (d as f64).sqrt()),
                ),
            });
            blocks.push(BlockWeights {
                modulation,
                self_attn: b.attn(&format!("block{i}.attn"), d),
                cross_attn: b.attn(&format!("block{i}.cross"), d),
                mlp: b.two_layer(&format!("block{i}.mlp"), d, 4 * d, d, false),
            });
        }
        let out = b.dense("out", d, pf.token_dim(), true);
        Ok(Self {
            config,
            store: b.store,
            patch_in,
            pos_t,
            pos_h,
            pos_w,
            null_context,
            cond,
            blocks,
            out,
        })
    }

    pub fn flags(&self) -> PoseFlags {
        PoseFlags {
            adaln: self.config.adaln_pose,
            cross_attn: self.config.cross_attn_pose,
        }
    }

    /// Parameters that only pose information flows through.
    pub fn is_pose_parameter(name: &str) -> bool {
        name.starts_with("g_e.")
            || name.starts_with("g_m.")
            || name.starts_with("pose_token.")
            || (name.starts_with("block") && (name.contains(".cross.")))
    }

    /// `(e_P [B, d], m_P [B, 3d])` from flattened controls `[B, M·138]`.
    pub fn pose_global_conditioning(&self, g: &mut Graph, controls: Var) -> Result<(Var, Var), TensorError> {
        let e = two_layer(g, &self.store, controls, self.cond.g_e)?;
        let m = two_layer(g, &self.store, controls, self.cond.g_m)?;
        Ok((e, m))
    }

    /// `(e_t [B, d], m_t [B, 3d])` from per-sample noise codes.
    pub fn step_conditioning(&self, g: &mut Graph, c_noise: &[f64]) -> Result<(Var, Var), TensorError> {
        let de = self.config.time_embed_dim;
        let codes: Vec<f64> = c_noise.iter().flat_map(|&c| sinusoidal_embedding(c, de)).collect();
        let s = g.constant(Tensor::new(&[c_noise.len(), de], codes)?);
        let e = dense(g, &self.store, s, self.cond.time)?;
        let m = two_layer(g, &self.store, s, self.cond.f)?;
        Ok((e, m))
    }

    /// `[β, γ, g] = SiLU(e) W_m2 W_m1 + m`, split in that order. `silu_e` is
    /// `[B, d]`, `m` is `[B, 3d]`; returned vectors are `[B, d]`.
    pub fn modulation_params(
        &self,
        g: &mut Graph,
        silu_e: Var,
        m: Var,
        w: ModWeights,
    ) -> Result<ModulationTriple, TensorError> {
        let d = self.config.d;
        let w2 = g.param(&self.store, w.w_m2);
        let w1 = g.param(&self.store, w.w_m1);
        let h = g.matmul(silu_e, w2)?;
        let h = g.matmul(h, w1)?;
        let h = g.add(h, m)?;
        Ok(ModulationTriple {
            beta: g.narrow(h, 1, 0, d)?,
            gamma: g.narrow(h, 1, d, d)?,
            gate: g.narrow(h, 1, 2 * d, d)?,
        })
    }

    /// Per-frame pose tokens `[B, M, d]`: `LN(GELU(P_m W_p)) + PE(m)`.
    pub fn pose_tokens(&self, g: &mut Graph, controls: Var) -> Result<Var, TensorError> {
        let b = g.shape(controls)[0];
        let m = self.config.future_frames;
        let frames = g.reshape(controls, &[b, m, FRAME_WIDTH])?;
        let h = dense(g, &self.store, frames, self.cond.w_p)?;
        let h = g.gelu(h)?;
        let h = g.layer_norm(h, LN_EPS)?;
        let pe = g.constant(pose_positional_encoding(m, self.config.pose_token_dim));
        g.add(h, pe)
    }

    fn attend(&self, g: &mut Graph, x: Var, ctx: Var, w: &AttnWeights) -> Result<Var, TensorError> {
        let q = dense(g, &self.store, x, w.q)?;
        let k = dense(g, &self.store, ctx, w.k)?;
        let v = dense(g, &self.store, ctx, w.v)?;
        let a = attention(g, q, k, v, self.config.heads)?;
        dense(g, &self.store, a, w.o)
    }

    /// Three gated residual updates: self-attention, cross-attention to the
    /// pose context (skipped when `ctx` is `None`), and the GELU MLP.
    pub fn dit_block_forward(
        &self,
        g: &mut Graph,
        block: usize,
        u: Var,
        triples: &[ModulationTriple; 3],
        ctx: Option<Var>,
    ) -> Result<Var, TensorError> {
        let w = &self.blocks[block];
        let [t_self, t_cross, t_mlp] = *triples;

        let h = adaln(g, u, t_self.beta, t_self.gamma)?;
        let a = self.attend(g, h, h, &w.self_attn)?;
        let a = g.mul(a, t_self.gate)?;
        let mut u = g.add(u, a)?;

        if let Some(ctx) = ctx {
            let h = adaln(g, u, t_cross.beta, t_cross.gamma)?;
            let a = self.attend(g, h, ctx, &w.cross_attn)?;
            let a = g.mul(a, t_cross.gate)?;
            u = g.add(u, a)?;
        }

        let h = adaln(g, u, t_mlp.beta, t_mlp.gamma)?;
        let h = dense(g, &self.store, h, w.mlp.first)?;
        let h = g.gelu(h)?;
        let h = dense(g, &self.store, h, w.mlp.second)?;
        let h = g.mul(h, t_mlp.gate)?;
        g.add(u, h)
    }

    /// Learned factorized position embedding summed to `[L, d]`.
    fn positions(&self, g: &mut Graph) -> Result<Var, TensorError> {
        let pf = self.config.patchifier();
        let (t, rows, cols) = (self.config.latent_frames, pf.rows(), pf.cols());
        let l = t * rows * cols;
        let onehot = |n: usize, pick: &dyn Fn(usize) -> usize| {
            let mut data = vec![0.0; l * n];
            for tok in 0..l {
                data[tok * n + pick(tok)] = 1.0;
            }
            Tensor::new(&[l, n], data).expect("finite")
        };
        let st = g.constant(onehot(t, &|tok| tok / (rows * cols)));
        let sh = g.constant(onehot(rows, &|tok| (tok / cols) % rows));
        let sw = g.constant(onehot(cols, &|tok| tok % cols));
        let pt = g.param(&self.store, self.pos_t);
        let ph = g.param(&self.store, self.pos_h);
        let pw = g.param(&self.store, self.pos_w);
        let a = g.matmul(st, pt)?;
        let b = g.matmul(sh, ph)?;
        let c = g.matmul(sw, pw)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    }

    /// Network output for the generated tokens, `[B, L_gen, token_dim]`.
    pub fn forward(&self, g: &mut Graph, batch: &ForwardBatch, flags: PoseFlags) -> Result<Var, TensorError> {
        let cfg = &self.config;
        let pf = cfg.patchifier();
        let bsz = batch.batch();
        let l = cfg.latent_frames * pf.tokens_per_frame();
        let lc = cfg.context_latents() * pf.tokens_per_frame();
        let p = pf.token_dim();
        let d = cfg.d;
        if batch.tokens.len() != bsz * l * p
            || batch.null_context.len() != bsz
            || (batch.controls.len() != bsz * cfg.control_len())
        {
            return Err(TensorError::ShapeMismatch {
                op: "denoiser input",
                lhs: vec![bsz, l, p],
                rhs: vec![batch.tokens.len(), batch.controls.len()],
            });
        }

        let x = g.constant(Tensor::new(&[bsz, l, p], batch.tokens.to_vec())?);
        let mut emb = dense(g, &self.store, x, self.patch_in)?;
        if batch.null_context.iter().any(|&n| n) {
            let mut keep = vec![1.0; bsz * l * d];
            for (b, _) in batch.null_context.iter().enumerate().filter(|(_, &n)| n) {
                keep[b * l * d..(b * l + lc) * d].iter_mut().for_each(|v| *v = 0.0);
            }
            let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = g.constant(Tensor::new(&[bsz, l, d], keep)?);
            let drop = g.constant(Tensor::new(&[bsz, l, d], drop)?);
            let null = g.param(&self.store, self.null_context);
            let kept = g.mul(emb, keep)?;
            let nulls = g.mul(drop, null)?;
            emb = g.add(kept, nulls)?;
        }
        let pos = self.positions(g)?;
        let mut u = g.add(emb, pos)?;

        let (mut e, mut m) = self.step_conditioning(g, batch.c_noise)?;
        let needs_controls = flags.adaln || flags.cross_attn;
        let controls = if needs_controls {
            Some(g.constant(Tensor::new(&[bsz, cfg.control_len()], batch.controls.to_vec())?))
        } else {
            None
        };
        if flags.adaln {
            let (e_p, m_p) = self.pose_global_conditioning(g, controls.expect("controls"))?;
            e = g.add(e, e_p)?;
            m = g.add(m, m_p)?;
        }
        let ctx = if flags.cross_attn {
            Some(self.pose_tokens(g, controls.expect("controls"))?)
        } else {
            None
        };
        let silu_e = g.silu(e)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut triples = Vec::with_capacity(3);
            for w in block.modulation {
                let t = self.modulation_params(g, silu_e, m, w)?;
                triples.push(ModulationTriple {
                    beta: g.expand(t.beta, 1, l)?,
                    gamma: g.expand(t.gamma, 1, l)?,
                    gate: g.expand(t.gate, 1, l)?,
                });
            }
            let triples: [ModulationTriple; 3] = triples.try_into().expect("three components");
            u = self.dit_block_forward(g, i, u, &triples, ctx)?;
        }
        let h = g.layer_norm(u, LN_EPS)?;
        let out = dense(g, &self.store, h, self.out)?;
        g.narrow(out, 1, lc, l - lc)
    }
}

/// `e = e_t + e_P`, `m = m_t + m_P`.
pub fn combine_conditioning(g: &mut Graph, e_t: Var, e_p: Var, m_t: Var, m_p: Var) -> Result<(Var, Var), TensorError> {
    Ok((g.add(e_t, e_p)?, g.add(m_t, m_p)?))
}
