//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 are exact properties and fail the process when violated.
//! Criteria 7-10 depend on what the toy-scale networks learn; they are
//! reported and only fail the process when POSEVID_ACCEPTANCE_STRICT=1.
//! Trained runs are cached under POSEVID_ACCEPTANCE_DIR (default
//! target/tmp/acceptance) and resumed on the next invocation.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix4, Rotation3, Vector3};
use rand::Rng;

use posevid::dit::{latent_frames_for, DenoiserModel, DiTConfig, ForwardBatch, ModulationTriple, PoseFlags};
use posevid::edm::{
    cfg_denoise, perturb, sample, training_loss_value, Condition, Denoiser, GuidanceConfig, ModelDenoiser,
    NoiseSchedule, TrainingExample,
};
use posevid::error::TensorError;
use posevid::eval::{evaluate_clip, generate_future, Metrics, TrackerConfig};
use posevid::harness::{
    ablate, load_checkpoint, read_log, AblationTable, Cell, GridConfig, Mechanism, ModelSection, PoseVariant, RunConfig,
};
use posevid::numeric::gradcheck::{check_inputs, check_params, GradCheckOptions};
use posevid::numeric::nn::{attention, linear};
use posevid::numeric::{rng_from, seeded_normal, Graph, ParamId, Tensor, Var};
use posevid::se3::{
    head_deltas, pelvis_deltas, pelvis_relative_joints, pose6d_to_transform, transform_to_6d, BodyPoseFrame,
    ControlTensor, Joint, Pose6D, PoseSequence, RigidTransform, NUM_JOINTS, ROW_HEAD,
};
use posevid::world::{
    generate_dataset, render_frame, sample_trajectory, Dataset, DatasetConfig, Image, Split, TrajectoryConfig,
};

struct Outcome {
    id: &'static str,
    pass: bool,
    hard: bool,
}

struct Report {
    outcomes: Vec<Outcome>,
}

impl Report {
    fn record(&mut self, id: &'static str, title: &str, pass: bool, hard: bool, detail: &str) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>3} {title}: {detail}");
        self.outcomes.push(Outcome { id, pass, hard });
    }
}

fn max_diff4(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    (a - b).abs().max()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    d.min(2.0 * std::f64::consts::PI - d)
}

fn pose_diff(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let t = (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
    let r = (3..6).map(|i| angle_diff(a[i], b[i])).fold(0.0, f64::max);
    t.max(r)
}

/// Rx(roll)·Ry(pitch)·Rz(yaw) from axis-angle rotations, as a 4x4 matrix.
fn euler_oracle(t: [f64; 3], roll: f64, pitch: f64, yaw: f64) -> Matrix4<f64> {
    let r = Rotation3::from_axis_angle(&Vector3::x_axis(), roll)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    m[(0, 3)] = t[0];
    m[(1, 3)] = t[1];
    m[(2, 3)] = t[2];
    m
}

fn random_pose(rng: &mut impl Rng, reach: f64) -> ([f64; 3], f64, f64, f64) {
    let pi = std::f64::consts::PI;
    (
        [
            rng.gen_range(-reach..reach),
            rng.gen_range(-reach..reach),
            rng.gen_range(-reach..reach),
        ],
        rng.gen_range(-pi..pi),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-pi..pi),
    )
}

fn random_transform(rng: &mut impl Rng, reach: f64) -> RigidTransform {
    let (t, r, p, y) = random_pose(rng, reach);
    RigidTransform::from_euler(t, r, p, y)
}

fn random_body(rng: &mut impl Rng) -> BodyPoseFrame {
    BodyPoseFrame::canonical((0..NUM_JOINTS).map(|_| random_transform(rng, 3.0)).collect()).unwrap()
}

fn se3_suite(report: &mut Report) {
    let start = Instant::now();
    let mut rng = rng_from(2024, &[1]);

    // transform -> 6D -> transform, with the transform built by an independent oracle
    let mut round = 0.0f64;
    for _ in 0..1000 {
        let (t, roll, pitch, yaw) = random_pose(&mut rng, 5.0);
        let oracle = euler_oracle(t, roll, pitch, yaw);
        let h = RigidTransform::new(
            oracle.fixed_view::<3, 3>(0, 0).into_owned(),
            Vector3::new(t[0], t[1], t[2]),
        )
        .unwrap();
        let v = transform_to_6d(&h);
        round = round.max(pose_diff(&v.to_array(), &[t[0], t[1], t[2], roll, pitch, yaw]));
        round = round.max(max_diff4(&pose6d_to_transform(&v).to_matrix4(), &oracle));
    }

    // chained deltas against raw 4x4 products
    let mut chain = 0.0f64;
    for m in [1usize, 2, 7, 32, 128, 256] {
        let mut frames = Vec::with_capacity(m + 1);
        let mut head = random_transform(&mut rng, 2.0);
        let mut pelvis = random_transform(&mut rng, 2.0);
        for _ in 0..=m {
            let mut joints: Vec<RigidTransform> = (0..NUM_JOINTS).map(|_| random_transform(&mut rng, 2.0)).collect();
            joints[Joint::Head.index()] = head;
            joints[Joint::Pelvis.index()] = pelvis;
            frames.push(BodyPoseFrame::canonical(joints).unwrap());
            let (t, r, p, y) = random_pose(&mut rng, 0.2);
            head = RigidTransform::from_euler(t, 0.3 * r, 0.3 * p, 0.3 * y).compose(&head);
            let (t, r, p, y) = random_pose(&mut rng, 0.2);
            pelvis = RigidTransform::from_euler(t, 0.3 * r, 0.3 * p, 0.3 * y).compose(&pelvis);
        }
        let seq = PoseSequence::new(frames, 1.0 / 30.0).unwrap();
        for (deltas, joint) in [(head_deltas(&seq), Joint::Head), (pelvis_deltas(&seq), Joint::Pelvis)] {
            let mut acc = Matrix4::identity();
            for d in &deltas {
                acc = pose6d_to_transform(&Pose6D::from_array(*d)).to_matrix4() * acc;
            }
            let first = seq.frames()[0].joint(joint).to_matrix4();
            let last = seq.frames()[m].joint(joint).to_matrix4();
            let expect = last * first.try_inverse().unwrap();
            chain = chain.max(max_diff4(&acc, &expect));
        }
    }

    // pelvis-relative joints under global rigid motion
    let mut invariance = 0.0f64;
    for _ in 0..200 {
        let body = random_body(&mut rng);
        let g = random_transform(&mut rng, 5.0);
        let a = pelvis_relative_joints(&body);
        let b = pelvis_relative_joints(&body.transformed(&g));
        for (x, y) in a.iter().zip(&b) {
            invariance = invariance.max(pose_diff(x, y));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = round < 1e-9 && chain < 1e-8 && invariance < 1e-12 && secs < 10.0;
    report.record(
        "1",
        "SE(3) suite",
        pass,
        true,
        &format!("round-trip {round:.1e} (<1e-9), chain M<=256 {chain:.1e} (<1e-8), invariance {invariance:.1e} (<1e-12), {secs:.2}s (<10s)"),
    );
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("matmul_t", vec![vec![2, 3, 4], vec![5, 4]], |g, v| {
            g.matmul_t(v[0], v[1])
        }),
        ("matmul_t_batched", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v| {
            g.matmul_t(v[0], v[1])
        }),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |g, v| {
            linear(g, v[0], v[1], Some(v[2]))
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("scale_offset", vec![vec![5]], |g, v| {
            let s = g.scale(v[0], -1.7)?;
            g.offset(s, 0.3)
        }),
        ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("layer_norm", vec![vec![3, 6]], |g, v| g.layer_norm(v[0], 1e-5)),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0])),
        ("silu", vec![vec![8]], |g, v| g.silu(v[0])),
        ("gelu", vec![vec![8]], |g, v| g.gelu(v[0])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("narrow", vec![vec![2, 5, 3]], |g, v| g.narrow(v[0], 1, 1, 3)),
        ("concat", vec![vec![2, 2, 3], vec![2, 1, 3]], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        ("expand", vec![vec![2, 3]], |g, v| g.expand(v[0], 1, 4)),
        (
            "attention",
            vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 4]],
            |g, v| attention(g, v[0], v[1], v[2], 2),
        ),
    ]
}

fn small_dit(d: usize, depth: usize) -> DiTConfig {
    DiTConfig {
        d,
        r: d / 4,
        heads: 4,
        depth,
        patch_size: 1,
        latent_frames: 2,
        latent_height: 2,
        latent_width: 3,
        latent_channels: 3,
        time_embed_dim: 16,
        pose_token_dim: d,
        future_frames: 4,
        past_frames: 1,
        adaln_pose: true,
        cross_attn_pose: true,
        init_seed: 5,
    }
}

fn randomize(model: &mut DenoiserModel, seed: u64, std: f64) {
    let ids: Vec<ParamId> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = model.store.value(id).shape().to_vec();
        let data: Vec<f64> = seeded_normal(&shape, seed * 1000 + k as u64)
            .data()
            .iter()
            .map(|x| x * std)
            .collect();
        model.store.set_value(id, &data).unwrap();
    }
}

struct Inputs {
    tokens: Vec<f64>,
    c_noise: Vec<f64>,
    controls: Vec<f64>,
    nulls: Vec<bool>,
}

impl Inputs {
    fn new(cfg: &DiTConfig, seed: u64) -> Self {
        let pf = cfg.patchifier();
        let l = cfg.latent_frames * pf.tokens_per_frame();
        Self {
            tokens: seeded_normal(&[2 * l * pf.token_dim()], seed).into_data(),
            c_noise: vec![-0.4, 0.6],
            controls: seeded_normal(&[2 * cfg.control_len()], seed + 1)
                .data()
                .iter()
                .map(|x| 0.3 * x)
                .collect(),
            nulls: vec![false, true],
        }
    }

    fn batch(&self) -> ForwardBatch<'_> {
        ForwardBatch {
            tokens: &self.tokens,
            c_noise: &self.c_noise,
            controls: &self.controls,
            null_context: &self.nulls,
        }
    }
}

const BOTH: PoseFlags = PoseFlags {
    adaln: true,
    cross_attn: true,
};
const NONE: PoseFlags = PoseFlags {
    adaln: false,
    cross_attn: false,
};

fn gradient_suite(report: &mut Report) {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    let mut probes = 0;
    for (name, shapes, f) in op_cases() {
        for trial in 0..20u64 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| seeded_normal(s, 7000 + trial * 31 + i as u64))
                .collect();
            let opts = GradCheckOptions {
                seed: trial,
                ..GradCheckOptions::default()
            };
            let r = check_inputs(&inputs, f, opts).unwrap();
            probes += r.checked;
            if r.max_rel_error > worst_op.0 {
                worst_op = (r.max_rel_error, name);
            }
        }
    }

    let mut model = DenoiserModel::new(small_dit(32, 2)).unwrap();
    randomize(&mut model, 17, 0.2);
    let inputs = Inputs::new(&model.config, 3);
    let pf = model.config.patchifier();
    let target = seeded_normal(
        &[
            2,
            pf.tokens_per_frame() * (model.config.latent_frames - 1),
            pf.token_dim(),
        ],
        4,
    );
    let cfg = model.config.clone();
    let mut store = model.store.clone();
    let full = check_params(
        &mut store,
        |g: &mut Graph, s| -> Result<Var, TensorError> {
            let mut m = DenoiserModel::new(cfg.clone()).unwrap();
            m.store = s.clone();
            let f = m.forward(g, &inputs.batch(), BOTH)?;
            let t = g.constant(target.clone());
            let diff = g.sub(f, t)?;
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        },
        Some(12),
        GradCheckOptions::default(),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_op.0 < 1e-4 && full.max_rel_error < 1e-4 && secs < 300.0;
    report.record(
        "2",
        "gradient suite",
        pass,
        true,
        &format!(
            "ops worst rel {:.1e} ({}, {probes} probes), d32/depth2 denoiser rel {:.1e} ({} probes), {secs:.1}s (<300s)",
            worst_op.0, worst_op.1, full.max_rel_error, full.checked
        ),
    );
}

fn numerical_rank(rows: &[Vec<f64>]) -> usize {
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > max * 1e-9).count()
}

fn forward(model: &DenoiserModel, inputs: &Inputs, flags: PoseFlags) -> Tensor {
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &inputs.batch(), flags).unwrap();
    g.value(out).clone()
}

fn small_latent(cfg: &DiTConfig, seed: u64) -> posevid::dit::LatentVideo {
    let geo = cfg.geometry();
    posevid::dit::LatentVideo::new(
        geo,
        seeded_normal(&[geo.len()], seed)
            .data()
            .iter()
            .map(|x| 0.5 * x)
            .collect(),
    )
    .unwrap()
}

fn conditioning_suite(report: &mut Report) {
    let mut model = DenoiserModel::new(small_dit(32, 2)).unwrap();
    randomize(&mut model, 21, 0.2);
    let d = model.config.d;

    // zero gates: the block returns its input
    let mut g = Graph::new();
    let u = g.constant(seeded_normal(&[6, d], 1));
    let ctx = g.constant(seeded_normal(&[4, d], 2));
    let tr = [0u64, 1, 2].map(|k| ModulationTriple {
        beta: g.constant(seeded_normal(&[d], 10 + k)),
        gamma: g.constant(seeded_normal(&[d], 20 + k)),
        gate: g.constant(Tensor::zeros(&[d])),
    });
    let out = model.dit_block_forward(&mut g, 1, u, &tr, Some(ctx)).unwrap();
    let gates = g.value(out) == g.value(u);

    // guidance weight 1 is the conditional branch
    let past = small_latent(&model.config, 3);
    let control = ControlTensor::from_vec(
        model.config.future_frames,
        seeded_normal(&[model.config.control_len()], 4)
            .data()
            .iter()
            .map(|x| 0.2 * x)
            .collect(),
    )
    .unwrap();
    let cond = Condition {
        past: &past,
        control: &control,
    };
    let den = ModelDenoiser::new(&model, 0.5);
    let z = seeded_normal(&[past.geometry().generated_len()], 5).into_data();
    let cfg1 = cfg_denoise(&den, &z, 0.8, &cond, 1.0).unwrap() == den.denoise(&z, 0.8, &cond, false).unwrap();

    // zero pose conditioning reduces the additive combination to the unconditional model
    let mut reduced = model.clone();
    for name in ["g_e.1.w", "g_e.1.b", "g_m.1.w", "g_m.1.b"] {
        let id = reduced.store.id(name).unwrap();
        let n = reduced.store.value(id).numel();
        reduced.store.set_value(id, &vec![0.0; n]).unwrap();
    }
    let inputs = Inputs::new(&model.config, 6);
    let adaln_only = PoseFlags {
        adaln: true,
        cross_attn: false,
    };
    let with_zero_pose = forward(&reduced, &inputs, adaln_only);
    let additive =
        with_zero_pose == forward(&reduced, &inputs, NONE) && with_zero_pose.data().iter().any(|&v| v != 0.0);

    // low rank: with m = 0 the modulation outputs span at most r dimensions
    let r = model.config.r;
    let mut max_rank = 0;
    for block in 0..model.config.depth {
        for &w in &model.blocks[block].modulation {
            let mut rows = Vec::with_capacity(2 * r);
            for probe in 0..2 * r {
                let mut g = Graph::new();
                let e = g.constant(seeded_normal(&[1, d], 100 + probe as u64));
                let se = g.silu(e).unwrap();
                let mz = g.constant(Tensor::zeros(&[1, 3 * d]));
                let t = model.modulation_params(&mut g, se, mz, w).unwrap();
                rows.push(
                    [t.beta, t.gamma, t.gate]
                        .iter()
                        .flat_map(|&v| g.value(v).data().to_vec())
                        .collect(),
                );
            }
            max_rank = max_rank.max(numerical_rank(&rows));
        }
    }
    let pass = gates && cfg1 && additive && max_rank <= r;
    report.record(
        "3",
        "conditioning identities",
        pass,
        true,
        &format!(
            "zero gates identity {gates}, CFG w=1 conditional {cfg1}, additive reduction {additive}, modulation rank {max_rank} over {} probes (<= r = {r})",
            2 * r
        ),
    );
}

struct CleanOracle;

impl Denoiser for CleanOracle {
    fn denoise(&self, _z: &[f64], _s: f64, cond: &Condition, _null: bool) -> posevid::Result<Vec<f64>> {
        Ok(cond.past.generated().to_vec())
    }
}

struct FixedTarget(Vec<f64>);

impl Denoiser for FixedTarget {
    fn denoise(&self, _z: &[f64], _s: f64, _c: &Condition, _null: bool) -> posevid::Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

fn diffusion_suite(report: &mut Report) {
    let start = Instant::now();
    let mut model = DenoiserModel::new(small_dit(32, 2)).unwrap();
    randomize(&mut model, 31, 0.2);
    let cfg = model.config.clone();
    let clean = small_latent(&cfg, 1);
    let identity = (0..5).all(|s| perturb(&clean, 0.0, s).unwrap() == clean);

    let clips: Vec<_> = (10..14).map(|s| small_latent(&cfg, s)).collect();
    let control = ControlTensor::zeros(cfg.future_frames);
    let batch: Vec<TrainingExample> = clips
        .iter()
        .map(|c| TrainingExample {
            clean: c,
            control: &control,
            null_context: false,
        })
        .collect();
    let oracle_loss = (0..20)
        .map(|s| training_loss_value(&CleanOracle, &batch, &NoiseSchedule::default(), s).unwrap())
        .fold(0.0f64, f64::max);

    let cond = Condition {
        past: &clean,
        control: &control,
    };
    let target = seeded_normal(&[clean.geometry().generated_len()], 2).into_data();
    let out = sample(
        &FixedTarget(target.clone()),
        &cond,
        &NoiseSchedule::default(),
        &GuidanceConfig::default(),
        3,
    )
    .unwrap();
    let converge = out
        .generated()
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let run = || {
        let den = ModelDenoiser::new(&model, 0.5);
        sample(&den, &cond, &NoiseSchedule::default(), &GuidanceConfig::default(), 9).unwrap()
    };
    let reference = run();
    let again = run();
    let threaded: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(run)).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let deterministic = again == reference && threaded.iter().all(|o| *o == reference);
    let secs = start.elapsed().as_secs_f64();
    let pass = identity && oracle_loss == 0.0 && converge < 1e-6 && deterministic && secs < 60.0;
    report.record(
        "4",
        "diffusion suite",
        pass,
        true,
        &format!(
            "sigma=0 identity {identity}, oracle loss {oracle_loss:e}, fixed-target error {converge:.1e} (<1e-6), bit-identical across runs and 4 threads {deterministic}, {secs:.1}s (<60s)"
        ),
    );
}

fn world_suite(report: &mut Report, ds: &Dataset) {
    let test = ds.ids(Split::Test);
    let rerender = test.iter().all(|&id| ds.verify_clip(id).unwrap());
    let tok = ds.tokenizer();
    let mut bijection = true;
    for id in ds.ids(Split::Train).into_iter().chain(test.iter().copied()) {
        let clip = ds.load_clip(id).unwrap();
        let lat = tok.tokenize(&clip.frames, clip.context_frames).unwrap();
        bijection &= tok.detokenize(&lat).unwrap() == clip.frames;
    }
    let traj = sample_trajectory(ds.scene(), &TrajectoryConfig::default(), 45, 3).unwrap();
    let frames: Vec<Image> = traj
        .iter()
        .map(|st| render_frame(ds.scene(), st, 16, 16).unwrap().0)
        .collect();
    let lat = tok.tokenize(&frames, 13).unwrap();
    let latents = lat.geometry().frames;
    bijection &= tok.detokenize(&lat).unwrap() == frames;
    let pass = rerender && bijection && latents == 12 && latent_frames_for(45) == 12;
    report.record(
        "5",
        "toy-world self-certification",
        pass,
        true,
        &format!(
            "{} test clips re-rendered bit-exactly {rerender}, tokenizer bijection {bijection}, 45 frames -> {latents} latent frames",
            test.len()
        ),
    );
}

fn oracle_calibration(report: &mut Report, ds: &Dataset) {
    let tracker = TrackerConfig::default();
    let ids = ds.ids(Split::Test);
    let (mut te, mut re, mut miou_min) = (0.0, 0.0, f64::INFINITY);
    for &id in &ids {
        let clip = ds.load_clip(id).unwrap();
        let m = evaluate_clip(ds.scene(), &clip, id, &clip.frames[clip.context_frames..], &tracker).unwrap();
        te += m.metrics.trans_error / ids.len() as f64;
        re += m.metrics.rot_error / ids.len() as f64;
        miou_min = miou_min.min(m.metrics.miou);
    }
    let pass = te < 0.01 && re < 0.5 && miou_min == 100.0;
    report.record(
        "6",
        "oracle calibration",
        pass,
        true,
        &format!("TransError {te:.4} m (<0.01), RotError {re:.3} deg (<0.5), min mIoU {miou_min} (=100)"),
    );
}

fn acceptance_root() -> PathBuf {
    std::env::var_os("POSEVID_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn dataset_config() -> DatasetConfig {
    DatasetConfig {
        clips: 64,
        clip_len: 13,
        context_frames: 5,
        width: 16,
        height: 16,
        clips_per_trajectory: 4,
        val_fraction: 0.0,
        test_fraction: 0.125,
        ..DatasetConfig::default()
    }
}

const DATASET_SEED: u64 = 0;

fn cell(name: &str, variant: PoseVariant, mechanism: Option<Mechanism>, untrained: bool) -> Cell {
    Cell {
        name: name.into(),
        variant,
        mechanism,
        untrained,
    }
}

fn grid(root: &std::path::Path) -> GridConfig {
    let mut base = RunConfig::new(root.join("data"));
    base.out_dir = root.join("runs");
    base.model = ModelSection {
        d: 192,
        r: 48,
        heads: 4,
        depth: 2,
        patch_size: 1,
        time_embed_dim: 32,
    };
    base.optimizer.lr = 1e-3;
    base.optimizer.batch_size = 4;
    base.optimizer.iterations = std::env::var("POSEVID_ACCEPTANCE_ITERATIONS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(3000);
    base.checkpoint_every = 500;
    GridConfig {
        base,
        seeds: vec![0, 1, 2],
        cells: vec![
            cell("base", PoseVariant::FullBody, None, true),
            cell("none", PoseVariant::None, None, false),
            cell("head_only", PoseVariant::HeadOnly, None, false),
            cell("full_body", PoseVariant::FullBody, None, false),
            cell("cumulative_head", PoseVariant::CumulativeHead, None, false),
            cell("adaln", PoseVariant::FullBody, Some(Mechanism::Adaln), false),
            cell("cross_attn", PoseVariant::FullBody, Some(Mechanism::CrossAttn), false),
        ],
    }
}

/// Opens the cached dataset, rebuilding the cache when the grid changed.
fn prepare(root: &std::path::Path, grid: &GridConfig) -> Dataset {
    let stamp = format!(
        "{}\n{}",
        toml::to_string(&dataset_config()).unwrap(),
        toml::to_string(grid).unwrap()
    );
    let stamp_path = root.join("grid.toml");
    if std::fs::read_to_string(&stamp_path).ok().as_deref() != Some(stamp.as_str()) {
        if root.exists() {
            std::fs::remove_dir_all(root).unwrap();
        }
        std::fs::create_dir_all(root).unwrap();
        generate_dataset(&dataset_config(), DATASET_SEED, &root.join("data")).unwrap();
        std::fs::write(&stamp_path, stamp).unwrap();
    }
    Dataset::open(&root.join("data")).unwrap()
}

type Field = fn(&Metrics) -> f64;

const MIOU: (&str, Field) = ("mIoU", |m| m.miou);
const TRANS: (&str, Field) = ("TransError", |m| m.trans_error);
const SSIM: (&str, Field) = ("SSIM", |m| m.ssim);

/// Training time recorded in the run logs; cached runs keep their original
/// cost, so a rerun does not look cheaper than the first invocation.
fn training_seconds(grid: &GridConfig) -> f64 {
    let mut total = 0.0;
    for cell in grid.cells.iter().filter(|c| !c.untrained) {
        for &seed in &grid.seeds {
            let log = read_log(&grid.run_config(cell, seed).log_path()).unwrap();
            total += log.last().map_or(0.0, |r| r.wall_time);
        }
    }
    total
}

/// `better` beats `worse` on `field` by more than twice the larger
/// across-seed standard deviation. `lower` flips the direction.
fn ordered(table: &AblationTable, better: &str, worse: &str, field: (&str, Field), lower: bool) -> (bool, String) {
    let a = table.row(better).unwrap();
    let b = table.row(worse).unwrap();
    let (ma, mb) = ((field.1)(&a.mean), (field.1)(&b.mean));
    let sd = (field.1)(&a.sd).max((field.1)(&b.sd));
    let gap = if lower { mb - ma } else { ma - mb };
    let pass = gap > 2.0 * sd;
    let op = if lower { "<" } else { ">" };
    (
        pass,
        format!(
            "{} {better} {ma:.3} {op} {worse} {mb:.3} (gap {gap:.3}, 2sd {:.3})",
            field.0,
            2.0 * sd
        ),
    )
}

fn check_all(report: &mut Report, id: &'static str, title: &str, checks: Vec<(bool, String)>) {
    let pass = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|(p, s)| format!("{}{s}", if *p { "" } else { "NOT " }))
        .collect::<Vec<_>>()
        .join("; ");
    report.record(id, title, pass, false, &detail);
}

fn table_orderings(report: &mut Report, table: &AblationTable, secs: f64) {
    let base = table.row("base").unwrap().mean;
    println!(
        "      base (untrained): SSIM {:.3}, TransError {:.3}, mIoU {:.3}; training + evaluation {secs:.0}s",
        base.ssim, base.trans_error, base.miou
    );
    let mut checks = vec![
        ordered(table, "full_body", "head_only", MIOU, false),
        ordered(table, "head_only", "none", MIOU, false),
        ordered(table, "full_body", "head_only", TRANS, true),
        ordered(table, "head_only", "none", TRANS, true),
        ordered(table, "full_body", "none", SSIM, false),
    ];
    checks.push((secs < 4.0 * 3600.0, format!("training + evaluation {secs:.0}s (<4h)")));
    check_all(report, "7", "pose-information ordering", checks);
    check_all(
        report,
        "8",
        "head encoding ordering",
        vec![ordered(table, "head_only", "cumulative_head", TRANS, true)],
    );
    check_all(
        report,
        "9",
        "pathway ordering",
        vec![
            ordered(table, "full_body", "adaln", SSIM, false),
            ordered(table, "full_body", "cross_attn", SSIM, false),
            ordered(table, "full_body", "adaln", TRANS, true),
            ordered(table, "full_body", "cross_attn", TRANS, true),
            ordered(table, "full_body", "adaln", MIOU, false),
            ordered(table, "cross_attn", "adaln", MIOU, false),
        ],
    );
}

fn steer(report: &mut Report, grid: &GridConfig, ds: &Dataset) {
    let cfg = grid.run_config(&grid.cells[3], grid.seeds[0]);
    let (model, _) = load_checkpoint(&cfg.checkpoint_dir()).unwrap();
    let id = ds.ids(Split::Test)[0];
    let clip = ds.load_clip(id).unwrap();
    let base = PoseVariant::FullBody.control(&clip.control_window().unwrap());
    let tok = ds.tokenizer();
    let tracker = TrackerConfig::default();
    let mut hits = 0;
    let mut signs = Vec::new();
    for seed in 0..10u64 {
        let mut ok = true;
        for rate in [0.3, -0.3] {
            let mut control = base.clone();
            for m in 0..control.frames() {
                control.row_mut(m, ROW_HEAD)[5] = rate;
            }
            let frames = generate_future(
                &model,
                &tok,
                &clip.frames[..clip.context_frames],
                &control,
                &cfg.schedule,
                &cfg.guidance,
                seed,
            )
            .unwrap();
            let m = evaluate_clip(ds.scene(), &clip, id, &frames, &tracker).unwrap();
            signs.push(format!("{:+.2}", m.recovered_yaw_change));
            ok &= m.recovered_yaw_change.signum() == f64::signum(rate) && m.recovered_yaw_change != 0.0;
        }
        hits += ok as usize;
    }
    report.record(
        "10",
        "pose steerability",
        hits >= 8,
        false,
        &format!("{hits}/10 seeds recover the commanded yaw sign for both +0.3 and -0.3 rad/frame (>= 8); final yaw changes {}", signs.join(" ")),
    );
}

/// Trained full_body latents react to a head-yaw perturbation while the
/// context slots stay fixed.
fn pose_sensitivity(report: &mut Report, grid: &GridConfig, ds: &Dataset) {
    let cfg = grid.run_config(&grid.cells[3], grid.seeds[0]);
    let (model, _) = load_checkpoint(&cfg.checkpoint_dir()).unwrap();
    let id = ds.ids(Split::Test)[0];
    let clip = ds.load_clip(id).unwrap();
    let control = PoseVariant::FullBody.control(&clip.control_window().unwrap());
    let mut bumped = control.clone();
    bumped.row_mut(0, ROW_HEAD)[5] += 0.2;
    let past = ds.tokenizer().tokenize(&clip.frames, clip.context_frames).unwrap();
    let den = ModelDenoiser::new(&model, cfg.schedule.sigma_data);
    let run = |c: &ControlTensor| {
        sample(
            &den,
            &Condition {
                past: &past,
                control: c,
            },
            &cfg.schedule,
            &cfg.guidance,
            1,
        )
        .unwrap()
    };
    let (a, b) = (run(&control), run(&bumped));
    let l2 = a
        .generated()
        .iter()
        .zip(b.generated())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let context = a.context() == past.context() && b.context() == past.context();
    report.record(
        "10b",
        "pose sensitivity",
        l2 > 0.0 && context,
        false,
        &format!("+0.2 rad head yaw moves generated latents by L2 {l2:.4}, context slots bit-identical {context}"),
    );
}

fn main() {
    let mut report = Report { outcomes: Vec::new() };
    se3_suite(&mut report);
    gradient_suite(&mut report);
    conditioning_suite(&mut report);
    diffusion_suite(&mut report);

    let root = acceptance_root();
    let grid = grid(&root);
    let ds = prepare(&root, &grid);
    world_suite(&mut report, &ds);
    oracle_calibration(&mut report, &ds);

    let start = Instant::now();
    let table = ablate(&grid).unwrap();
    std::fs::write(root.join("ablation.csv"), table.to_csv()).unwrap();
    table_orderings(
        &mut report,
        &table,
        start.elapsed().as_secs_f64() + training_seconds(&grid),
    );
    steer(&mut report, &grid, &ds);
    pose_sensitivity(&mut report, &grid, &ds);
    println!("      ablation table: {}", root.join("ablation.csv").display());

    let strict = std::env::var("POSEVID_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<&str> = report.outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let fatal = report.outcomes.iter().any(|o| !o.pass && (o.hard || strict));
    println!(
        "acceptance: {} of {} criteria pass{}",
        report.outcomes.len() - failed.len(),
        report.outcomes.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failed.join(", "))
        }
    );
    if fatal {
        std::process::exit(1);
    }
}
