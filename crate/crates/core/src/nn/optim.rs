use alloc::vec;
use alloc::vec::Vec;

use super::{ModelState, ParamFilter, ParamGrads};
use crate::error::{contract_err, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily for the
/// parameters an update actually touches.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter admitted by `filter`; consumes the
    /// corresponding gradients, leaving `grads` empty.
    pub fn step(&mut self, model: &mut ModelState, grads: &mut ParamGrads, filter: ParamFilter) -> Result<()> {
        let n = model.parameters().len();
        if grads.len() != n {
            return Err(contract_err!("gradient set has {} slots, model has {} parameters", grads.len(), n));
        }
        for (i, p) in model.parameters().iter().enumerate() {
            if filter.admits(p) && grads.get(i).is_none() {
                return Err(contract_err!("missing gradient for parameter {}", p.name));
            }
        }
        if self.moments.len() != n {
            self.moments = (0..n).map(|_| None).collect();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let bc1 = (1.0 - libm::pow(beta1 as f64, t)) as f32;
        let bc2 = (1.0 - libm::pow(beta2 as f64, t)) as f32;
        for (i, p) in model.parameters_mut().iter_mut().enumerate() {
            if !filter.admits(p) {
                continue;
            }
            let g = grads.take(i).expect("checked above");
            let len = g.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
        }
        grads.clear();
        Ok(())
    }
}
