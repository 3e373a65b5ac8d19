use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::TensorError;

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters with gradient buffers and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
    step: u64,
    has_grads: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let n = value.numel();
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Replaces a parameter's values in place; shape must match.
    pub fn set_value(&mut self, id: ParamId, data: &[f64]) -> Result<(), TensorError> {
        let e = &mut self.entries[id.0];
        if data.len() != e.value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: e.value.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "set_value" });
        }
        e.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: &[f64], v: &[f64]) {
        let e = &mut self.entries[id.0];
        e.m.copy_from_slice(m);
        e.v.copy_from_slice(v);
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<(), TensorError> {
        let e = &mut self.entries[id.0];
        if g.len() != e.grad.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: e.value.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        e.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub(crate) fn mark_backward(&mut self) {
        self.has_grads = true;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.has_grads = false;
    }

    /// Scales every accumulated gradient, e.g. to average over micro-batches.
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// One bias-corrected Adam update; gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), TensorError> {
        if !self.has_grads {
            return Err(TensorError::MissingGradient(
                "(no backward pass since last step)".into(),
            ));
        }
        if let Some(e) = self.entries.iter().find(|e| e.grad.iter().any(|g| !g.is_finite())) {
            return Err(TensorError::NonFinite { op: "adam_step" }).inspect_err(|_| {
                log::error!("non-finite gradient in `{}`", e.name);
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let data = e.value.data_mut();
            for i in 0..data.len() {
                let g = e.grad[i];
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }
}
