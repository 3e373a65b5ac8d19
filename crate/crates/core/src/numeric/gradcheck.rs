//! Central finite-difference checks of the tape's analytic gradients.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use super::random::rng_from;
use super::tensor::Tensor;
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }
}

/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

fn projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).numel();
    let mut rng = rng_from(seed, &[0x9d]);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Checks d(sum(R ⊙ f(inputs)))/d(inputs) for a fixed random projection `R`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = projection(&mut g, out, opts.seed)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = projection(&mut g, out, opts.seed)?;
    let grads = g.backward_inputs(loss)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + opts.step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - opts.step;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            report.record(analytic[j], (up - down) / (2.0 * opts.step), opts.floor);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar loss. `per_tensor` caps the number
/// of entries probed per parameter (`None` probes every entry).
pub fn check_params<F>(
    store: &mut ParameterStore,
    loss_fn: F,
    per_tensor: Option<usize>,
    opts: GradCheckOptions,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var, TensorError>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grads();
    let eval = |store: &ParameterStore| -> Result<f64, TensorError> {
        let mut g = Graph::inference();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut rng = rng_from(opts.seed, &[0x7a]);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.value(id).numel();
        let entries: Vec<usize> = match per_tensor {
            Some(cap) if cap < n => (0..cap).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut data = store.value(id).data().to_vec();
        for j in entries {
            let x0 = data[j];
            data[j] = x0 + opts.step;
            store.set_value(id, &data)?;
            let up = eval(store)?;
            data[j] = x0 - opts.step;
            store.set_value(id, &data)?;
            let down = eval(store)?;
            data[j] = x0;
            store.set_value(id, &data)?;
            report.record(analytic[k][j], (up - down) / (2.0 * opts.step), opts.floor);
        }
    }
    Ok(report)
}
