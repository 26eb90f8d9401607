//! AdamW with decoupled weight decay and a linear-warmup schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    decay: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    beta1_pow: f64,
    beta2_pow: f64,
    steps: u64,
}

impl AdamW {
    /// `decay[i]` selects whether tensor `i` is weight-decayed.
    pub fn new(config: AdamWConfig, tensors: &[Tensor], decay: Vec<bool>) -> Result<Self> {
        if decay.len() != tensors.len() {
            return Err(Error::shape("adamw decay flags", &[tensors.len()], &[decay.len()]));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || !(config.eps > 0.0) {
            return Err(Error::Param(format!("invalid AdamW hyperparameters {config:?}")));
        }
        Ok(AdamW {
            config,
            decay,
            m: tensors.iter().map(|t| alloc::vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| alloc::vec![0.0; t.len()]).collect(),
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`. `grads` pairs tensor indices with
    /// gradients; tensors without a gradient are left untouched. `lr == 0`
    /// leaves every tensor bit-unchanged.
    pub fn step<'g, I>(&mut self, tensors: &mut [Tensor], grads: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (usize, &'g [f64])>,
    {
        let c = self.config;
        self.steps += 1;
        self.beta1_pow *= c.beta1;
        self.beta2_pow *= c.beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;
        for (i, grad) in grads {
            let data = tensors[i].data_mut();
            if grad.len() != data.len() {
                return Err(Error::shape("adamw gradient", &[data.len()], &[grad.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if self.decay[i] { 1.0 - lr * c.weight_decay } else { 1.0 };
            for j in 0..data.len() {
                let gj = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                if lr == 0.0 {
                    continue;
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] * decay - lr * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `base/warmup` at step 0 to `base` at step
/// `warmup − 1`, then constant. Steps are 0-based.
pub fn warmup_lr(step: usize, base: f64, warmup: usize) -> f64 {
    if warmup == 0 || step + 1 >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}
