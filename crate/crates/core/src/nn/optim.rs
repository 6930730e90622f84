use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{MagnetError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<f64>>,
    pub second: BTreeMap<String, Tensor<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// `grads` pairs parameter ids in `store` with their gradients. The step is
/// rejected before any parameter changes if a gradient is not finite.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(usize, Tensor<f64>)],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        let e = store.entry(*id);
        if g.shape() != e.value.shape() {
            return Err(crate::error::dim_err("adamw", e.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(MagnetError::Numeric(format!(
                "non-finite gradient for parameter {}",
                e.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c = state.config.clone();
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (id, g) in grads {
        let entry = store.entry_mut(*id);
        if !entry.trainable {
            continue;
        }
        let shape = entry.value.shape().to_vec();
        let m = state
            .first
            .entry(entry.name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let v = state
            .second
            .entry(entry.name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let p = entry.value.data_mut();
        for (((pi, &gi), mi), vi) in p
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *pi -= lr * c.weight_decay * *pi;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Cosine annealing: `base * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(MagnetError::Usage(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
