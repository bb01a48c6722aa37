use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are laid out to match
/// the parameter set they were created for.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    skipped: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Steps skipped because a gradient was non-finite.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Applies one update from the accumulated gradients. Returns `false`
    /// (leaving everything untouched) if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> bool {
        let finite = params
            .iter()
            .all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|x| x.is_finite())));
        if !finite {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        true
    }
}
