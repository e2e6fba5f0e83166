use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{ParamMap, Tensor};

/// Mutable access to named model tensors.
pub trait ParamStore {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for ParamMap {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: ParamMap::new(), v: ParamMap::new() }
    }
}

/// One Adam update with decoupled weight decay: `p <- p (1 - lr wd)` first,
/// then the bias-corrected moment step.
pub fn adam_step(state: &mut AdamState, params: &mut impl ParamStore, grads: &ParamMap, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params.tensor_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: format!("param `{name}`"),
                lhs_shape: p.shape().to_vec(),
                rhs: "gradient".into(),
                rhs_shape: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let c = state.config.clone();
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (name, g) in grads {
        let p = params.tensor_mut(name).unwrap();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = 1.0 - lr * c.weight_decay;
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *p *= decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Noam schedule normalized so that `step == warmup` gives `lr_peak`.
pub fn noam_lr(step: u64, lr_peak: f64, warmup: u64, min_lr: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("noam schedule is defined from step 1"));
    }
    if warmup == 0 {
        return Err(Error::invalid("noam warmup must be positive"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((lr_peak * w.sqrt() * s.powf(-0.5).min(s * w.powf(-1.5))).max(min_lr))
}
