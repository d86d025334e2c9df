use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

/// AdamW hyper-parameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// One AdamW update of `w` in place.
pub fn adamw_step(w: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if w.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw",
            left: vec![w.len()],
            right: vec![grad.len()],
        });
    }
    if state.m.len() != w.len() {
        state.m = vec![0.0; w.len()];
        state.v = vec![0.0; w.len()];
        state.step = 0;
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((wi, &g), m), v) in w.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        *wi *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *wi -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            states: vec![AdamState::default(); n_params],
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                left: vec![params.len(), grads.len()],
                right: vec![self.states.len()],
            });
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adamw_step(p.data_mut(), g.data(), s, &self.config)?;
        }
        Ok(())
    }
}
