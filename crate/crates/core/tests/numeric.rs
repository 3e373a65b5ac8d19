use posevid::error::TensorError;
use posevid::numeric::gradcheck::{check_inputs, check_params, GradCheckOptions};
use posevid::numeric::nn::{attention, linear};
use posevid::numeric::{
    checkpoint, gelu_scalar, seeded_normal, silu_scalar, sinusoidal_embedding, AdamConfig, Graph, ParameterStore,
    Tensor, Var,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_shape() {
    let mut g = Graph::new();
    let a = seeded_normal(&[3, 3], 1);
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);

    let x = g.constant(Tensor::zeros(&[2, 3]));
    let y = g.constant(Tensor::zeros(&[3, 4]));
    let z = g.matmul(x, y).unwrap();
    assert_eq!(g.shape(z), &[2, 4]);
    let bad = g.constant(Tensor::zeros(&[4, 4]));
    assert!(matches!(g.matmul(x, bad), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_matches_naive_oracle() {
    for seed in 0..20 {
        let a = seeded_normal(&[4, 4], seed);
        let b = seeded_normal(&[4, 4], seed + 100);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), 4, 4, 4);
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_and_transposed_matmul() {
    let a = seeded_normal(&[2, 3, 5], 3);
    let b = seeded_normal(&[2, 4, 5], 4);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul_t(av, bv).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 4]);
    for batch in 0..2 {
        let bt: Vec<f64> = (0..5)
            .flat_map(|p| (0..4).map(move |j| (p, j)))
            .map(|(p, j)| b.data()[batch * 20 + j * 5 + p])
            .collect();
        let oracle = naive_matmul(&a.data()[batch * 15..(batch + 1) * 15], &bt, 3, 5, 4);
        for (x, y) in g.value(c).data()[batch * 12..(batch + 1) * 12].iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_definitional() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 5], 3.0));
    let y = g.layer_norm(c, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // eps shrinks the variance by var / (var + eps), so use rows with var >> eps
    let x = g.constant(seeded_normal(&[6, 16], 9));
    let x = g.scale(x, 40.0).unwrap();
    let y = g.layer_norm(x, 1e-5).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mu = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
    let narrow = g.constant(Tensor::zeros(&[3, 1]));
    assert!(g.layer_norm(narrow, 1e-5).is_err());
}

#[test]
fn attention_examples() {
    let mut g = Graph::new();
    // single key/value: output is v whatever q is
    let q = g.constant(seeded_normal(&[3, 4], 1));
    let k = g.constant(seeded_normal(&[1, 4], 2));
    let vt = seeded_normal(&[1, 4], 3);
    let v = g.constant(vt.clone());
    let o = attention(&mut g, q, k, v, 2).unwrap();
    let o = g.value(o).clone();
    for row in o.data().chunks(4) {
        for (a, b) in row.iter().zip(vt.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    // uniform logits: mean of v rows
    let q0 = g.constant(Tensor::zeros(&[2, 4]));
    let k3 = g.constant(seeded_normal(&[3, 4], 4));
    let v3t = seeded_normal(&[3, 4], 5);
    let v3 = g.constant(v3t.clone());
    let o = attention(&mut g, q0, k3, v3, 1).unwrap();
    let o = g.value(o).clone();
    for j in 0..4 {
        let mean = (0..3).map(|i| v3t.data()[i * 4 + j]).sum::<f64>() / 3.0;
        assert!((o.data()[j] - mean).abs() < 1e-12);
    }
    // two tokens, one head, d = 1: hand-computed softmax
    let q = g.constant(t(&[1, 1], &[0.7]));
    let k = g.constant(t(&[2, 1], &[1.0, -2.0]));
    let v = g.constant(t(&[2, 1], &[3.0, 5.0]));
    let o = attention(&mut g, q, k, v, 1).unwrap();
    let o = g.value(o).item();
    let (s1, s2) = (0.7f64, -1.4f64);
    let (e1, e2) = (s1.exp(), s2.exp());
    let expect = (3.0 * e1 + 5.0 * e2) / (e1 + e2);
    assert!((o - expect).abs() < 1e-12);
}

#[test]
fn activation_values() {
    assert_eq!(silu_scalar(0.0), 0.0);
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((silu_scalar(20.0) - 20.0).abs() < 1e-6);
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    }
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

#[test]
fn every_op_passes_finite_difference_checks() {
    for (name, shapes, f) in op_cases() {
        for trial in 0..100u64 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| seeded_normal(s, trial * 31 + i as u64))
                .collect();
            let r = check_inputs(&inputs, f, opts(trial)).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} trial {trial}: {r:?}");
        }
    }
}

#[test]
fn backward_simple_losses() {
    let mut store = ParameterStore::new();
    let theta = seeded_normal(&[5], 2);
    let id = store.add("theta", theta.clone()).unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let l = g.sum(p).unwrap();
    g.backward(l, &mut store).unwrap();
    assert!(store.grad(id).iter().all(|&x| x == 1.0));
    assert!(g.is_empty());

    store.zero_grads();
    let p = g.param(&store, id);
    let sq = g.mul(p, p).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l, &mut store).unwrap();
    for (gr, x) in store.grad(id).iter().zip(theta.data()) {
        assert!((gr - 2.0 * x).abs() < 1e-15);
    }

    let v = g.param(&store, id);
    assert!(matches!(g.backward(v, &mut store), Err(TensorError::NotScalar(_))));
}

#[test]
fn nonfinite_results_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], 1e200));
    assert!(matches!(g.mul(x, x), Err(TensorError::NonFinite { .. })));
    assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
}

#[test]
fn adam_behaviour() {
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut store = ParameterStore::new();
    let id = store.add("x", Tensor::scalar(1.0)).unwrap();
    assert!(store.adam_step(&cfg).is_err(), "no gradients yet");

    // zero gradient leaves parameters unchanged
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let z = g.scale(p, 0.0).unwrap();
    let l = g.sum(z).unwrap();
    g.backward(l, &mut store).unwrap();
    store.adam_step(&cfg).unwrap();
    assert_eq!(store.value(id).item(), 1.0);
    assert_eq!(store.step_count(), 1);

    // descent on x²
    let p = g.param(&store, id);
    let sq = g.mul(p, p).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l, &mut store).unwrap();
    store.adam_step(&cfg).unwrap();
    assert!(store.value(id).item() < 1.0);

    // 2-d quadratic converges
    let mut store = ParameterStore::new();
    let id = store.add("v", t(&[2], &[1.0, -2.0])).unwrap();
    let diag = t(&[2], &[1.0, 3.0]);
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut cur = f64::INFINITY;
    for step in 0..200 {
        let p = g.param(&store, id);
        let w = g.constant(diag.clone());
        let sq = g.mul(p, p).unwrap();
        let wsq = g.mul(sq, w).unwrap();
        let l = g.sum(wsq).unwrap();
        g.backward(l, &mut store).unwrap();
        store.adam_step(&cfg).unwrap();
        let norm = store.value(id).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if step > 150 {
            cur = cur.min(norm);
        }
    }
    let norm = store.value(id).data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "|x| = {norm} (best late {cur})");
}

#[test]
fn randomness_and_embeddings() {
    assert_eq!(seeded_normal(&[64], 5), seeded_normal(&[64], 5));
    assert_ne!(seeded_normal(&[64], 5), seeded_normal(&[64], 6));
    let s = sinusoidal_embedding(0.0, 8);
    for i in 0..4 {
        assert_eq!(s[2 * i], 0.0);
        assert_eq!(s[2 * i + 1], 1.0);
    }
    let big = seeded_normal(&[1_000_000], 11);
    let n = big.numel() as f64;
    let mean = big.data().iter().sum::<f64>() / n;
    let var = big.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01);
    assert!((var - 1.0).abs() < 0.01);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParameterStore::new();
    let a = store.add("a", seeded_normal(&[3, 4], 1)).unwrap();
    store.add("b", seeded_normal(&[7], 2)).unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, a);
    let l = g.sum(p).unwrap();
    g.backward(l, &mut store).unwrap();
    store.adam_step(&AdamConfig::default()).unwrap();
    checkpoint::save(&store, dir.path(), true).unwrap();

    let mut other = ParameterStore::new();
    other.add("a", Tensor::zeros(&[3, 4])).unwrap();
    other.add("b", Tensor::zeros(&[7])).unwrap();
    checkpoint::load_into(&mut other, dir.path()).unwrap();
    for id in store.ids() {
        assert_eq!(store.value(id), other.value(id));
        assert_eq!(store.moments(id), other.moments(id));
    }
    assert_eq!(other.step_count(), 1);
    let manifest = checkpoint::read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.tensors[1].offset, 96);

    let mut wrong = ParameterStore::new();
    wrong.add("a", Tensor::zeros(&[4, 3])).unwrap();
    wrong.add("b", Tensor::zeros(&[7])).unwrap();
    assert!(checkpoint::load_into(&mut wrong, dir.path()).is_err());
}

#[test]
fn parameter_gradcheck_of_small_mlp() {
    let mut store = ParameterStore::new();
    let w1 = store.add("w1", seeded_normal(&[4, 6], 1)).unwrap();
    let w2 = store.add("w2", seeded_normal(&[6, 2], 2)).unwrap();
    let x = seeded_normal(&[3, 4], 3);
    let r = check_params(
        &mut store,
        |g, s| {
            let xv = g.constant(x.clone());
            let a = g.param(s, w1);
            let b = g.param(s, w2);
            let h = g.matmul(xv, a)?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, b)?;
            let sq = g.mul(o, o)?;
            g.mean(sq)
        },
        None,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(r.checked, 36);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParameterStore::new();
    store.add("w", Tensor::zeros(&[1])).unwrap();
    assert!(matches!(
        store.add("w", Tensor::zeros(&[1])),
        Err(TensorError::DuplicateName(_))
    ));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], xs).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_deterministic(seed in 0u64..1000) {
        let a = seeded_normal(&[5, 7], seed);
        let b = seeded_normal(&[7, 3], seed ^ 1);
        let run = || {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let z = g.matmul(x, y).unwrap();
            g.value(z).clone()
        };
        let (r1, r2) = (run(), run());
        prop_assert_eq!(r1.data(), r2.data());
    }
}
