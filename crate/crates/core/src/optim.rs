//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter in a [`ParamStore`].
///
/// Parameters that receive no gradient in a step are skipped entirely: their
/// values, moments and per-parameter step counts stay untouched. Bias
/// correction uses the per-parameter count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    param_steps: Vec<u64>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            param_steps: vec![0; store.len()],
            steps: 0,
        }
    }

    /// Number of completed [`adam_step`] calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Applies one Adam update to every parameter that has a gradient.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::Precondition(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            store.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (id, grad) in store.ids().zip(grads) {
        let Some(grad) = grad else { continue };
        let param = store.get(id);
        if param.shape() != grad.shape() || state.first[id.index()].shape() != grad.shape() {
            return Err(Error::shape("adam_step", param.shape(), grad.shape()));
        }
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
        let Some(grad) = grad else { continue };
        let i = id.index();
        state.param_steps[i] += 1;
        let t = state.param_steps[i] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.steps += 1;
    Ok(())
}
