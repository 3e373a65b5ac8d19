//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so the tape order is a
//! topological order of the computation. `backward` walks it once in
//! reverse, accumulating vector-Jacobian products.

use std::collections::HashMap;

use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Offset { a: Var },
    Sum { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Softmax { a: Var },
    Silu { a: Var },
    Gelu { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Narrow { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Expand { a: Var, axis: usize, n: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the graph's `input` leaves.
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: HashMap<Var, Tensor>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }
}

/// Gradient tape. Values are computed eagerly.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices that cover the strided extents; matrixmultiply
    // reads `a`/`b` within those extents and writes `c` as an m x n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `permute(shape, axes)`, the flat source index.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            offset += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are loaded as constants; `backward` finds nothing to do.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward_inputs`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Loads a parameter onto the tape (once per graph).
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = if self.no_grad {
            self.push(store.value(id).clone(), Op::Constant, false)
        } else {
            self.push(store.value(id).clone(), Op::Param(id), true)
        };
        self.params.insert(id, v);
        v
    }

    /// `a @ b` (or `a @ bᵀ` when `trans_b`). `a` is `[.., m, k]`; `b` is either a
    /// shared `[k, n]` matrix or carries the same leading batch dimensions.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            if shared {
                gemm(batch * m, k, n, av, k, 1, bv, rsb, csb, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        k,
                        1,
                        &bv[i * k * n..],
                        rsb,
                        csb,
                        &mut out[i * m * n..],
                        false,
                    );
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push_checked(
            "matmul",
            Tensor::from_raw(out_shape, out),
            Op::MatMul { a, b, trans_b },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` over the last two dimensions.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if is_suffix(self.shape(a), self.shape(b)) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>, TensorError> {
        self.broadcast_check(name, a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        Ok(av
            .chunks_exact(nb)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect())
    }

    /// `a + b`, broadcasting `b` when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("add", Tensor::from_raw(shape, out), Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("sub", Tensor::from_raw(shape, out), Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", Tensor::from_raw(shape, out), Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push_checked("scale", Tensor::from_raw(shape, out), Op::Scale { a, factor }, ng)
    }

    /// `a + c` for a scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push_checked("offset", Tensor::from_raw(shape, out), Op::Offset { a }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Normalizes each row of the last dimension to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let n = *shape.last().expect("non-empty shape");
        if n < 2 {
            return Err(TensorError::InvalidArgument(
                "layer_norm needs last dimension >= 2".into(),
            ));
        }
        let mut out = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.numel() / n);
        for row in t.data().chunks_exact(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|x| (x - mu) * inv));
        }
        let ng = self.needs(a);
        self.push_checked(
            "layer_norm",
            Tensor::from_raw(shape, out),
            Op::LayerNorm { a, inv_std },
            ng,
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for x in row {
                let e = (x - mx).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let ng = self.needs(a);
        self.push_checked("softmax", Tensor::from_raw(shape, out), Op::Softmax { a }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| silu_scalar(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push_checked("silu", Tensor::from_raw(shape, out), Op::Silu { a }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push_checked("gelu", Tensor::from_raw(shape, out), Op::Gelu { a }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    /// Reorders dimensions: output dimension `i` is input dimension `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(TensorError::InvalidArgument(format!(
                "bad permutation {axes:?} for {shape:?}"
            )));
        }
        let idx = permute_index(&shape, axes);
        let src = self.value(a).data();
        let out = idx.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::from_raw(out_shape, out),
            Op::Permute { a, axes: axes.to_vec() },
            ng,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let dim = shape[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_raw(out_shape, out), Op::Narrow { a, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_raw(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Inserts a new dimension of extent `n` at `axis`, repeating `a` along it.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "expand axis {axis} x{n} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let row = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_raw(out_shape, out), Op::Expand { a, axis, n }, ng))
    }

    /// Reverse pass; parameter gradients are added into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<(), TensorError> {
        let grads = self.run_backward(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Param(id)) = (g, &self.nodes[i].op) {
                store.accumulate_grad(*id, &g)?;
            }
        }
        store.mark_backward();
        self.clear();
        Ok(())
    }

    /// Reverse pass returning gradients of the `input` leaves.
    pub fn backward_inputs(&mut self, loss: Var) -> Result<LeafGrads, TensorError> {
        let grads = self.run_backward(loss)?;
        let mut out = LeafGrads::default();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Input) = (g, &self.nodes[i].op) {
                let shape = self.nodes[i].value.shape().to_vec();
                out.grads.insert(Var(i), Tensor::from_raw(shape, g));
            }
        }
        self.clear();
        Ok(out)
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Param(_) | Op::Input | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, grads),
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let nb = gb.len();
                    for row in g.chunks_exact(nb) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (gr, go) in ga.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for j in 0..nb {
                            gr[j] += go[j] * bv[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (ar, go) in av.chunks_exact(nb).zip(g.chunks_exact(nb)) {
                        for j in 0..nb {
                            gb[j] += go[j] * ar[j];
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            Op::Offset { a } | Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("non-empty");
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[r * n + j] += inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("non-empty");
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((yr, gr), out) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Silu { a } => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for j in 0..x.len() {
                        let s = sigmoid(x[j]);
                        ga[j] += g[j] * s * (1.0 + x[j] * (1.0 - s));
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for j in 0..x.len() {
                        let v = x[j];
                        let th = (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::Permute { a, axes } => {
                let idx = permute_index(self.shape(*a), axes);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, &src) in idx.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let dim = shape[*axis];
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Expand { a, axis, n } => {
                let shape = self.shape(*a);
                let inner: usize = shape[*axis..].iter().product();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, chunk) in g.chunks_exact(n * inner).enumerate() {
                        let dst = &mut ga[o * inner..(o + 1) * inner];
                        for rep in chunk.chunks_exact(inner) {
                            dst.iter_mut().zip(rep).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            gp[o * d * inner..(o + 1) * d * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += d;
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if let Some(ga) = self.grad_slot(grads, a) {
            // dA = dC Bᵀ (or dC B when b is stored transposed)
            let (rsb, csb) = if trans_b { (k, 1) } else { (1, n) };
            if shared {
                gemm(batch * m, n, k, g, n, 1, bv, rsb, csb, ga, true);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        n,
                        1,
                        &bv[i * k * n..],
                        rsb,
                        csb,
                        &mut ga[i * m * k..],
                        true,
                    );
                }
            }
        }
        if let Some(gb) = self.grad_slot(grads, b) {
            if shared {
                if trans_b {
                    // dB[n,k] = dCᵀ A
                    gemm(n, batch * m, k, g, 1, n, av, k, 1, gb, true);
                } else {
                    // dB[k,n] = Aᵀ dC
                    gemm(k, batch * m, n, av, 1, k, g, n, 1, gb, true);
                }
            } else {
                for i in 0..batch {
                    let gi = &g[i * m * n..];
                    let ai = &av[i * m * k..];
                    let out = &mut gb[i * k * n..];
                    if trans_b {
                        gemm(n, m, k, gi, 1, n, ai, k, 1, out, true);
                    } else {
                        gemm(k, m, n, ai, 1, k, gi, n, 1, out, true);
                    }
                }
            }
        }
    }
}
