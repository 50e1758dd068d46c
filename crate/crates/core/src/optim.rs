//! Momentum SGD with L2 weight decay and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    /// The rate is divided by 10 every `decay_interval` iterations.
    pub decay_interval: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { base_lr: 1e-5, decay_interval: 1000, momentum: 0.9, weight_decay: 0.0005 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.decay_interval == 0 {
            return Err(Error::Config("learning rate and decay interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be nonnegative".into()));
        }
        Ok(())
    }

    /// `base · 0.1^⌊iter / decay_interval⌋`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let drops = (iter / self.decay_interval) as i32;
        self.base_lr / 10f64.powi(drops)
    }
}

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        SgdState { velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }
}

/// `v ← μ·v − lr·(g + λ·w);  w ← w + v`.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], state: &mut SgdState, cfg: &SgdConfig, iter: usize) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((name, w), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if g.shape() != w.shape() {
            return Err(Error::shape(format!("gradient for {name} has shape {:?}, expected {:?}", g.shape(), w.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} at iteration {iter}")));
        }
    }
    let lr = cfg.lr_at(iter);
    for ((w, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = cfg.momentum * *vi - lr * (gi + cfg.weight_decay * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}
