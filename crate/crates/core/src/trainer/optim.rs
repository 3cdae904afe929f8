use super::TrainConfig;
use crate::policy::{Gradients, PolicyParams};

/// Learning rate after `step` completed updates: linear warmup, then constant.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// Adam with bias-corrected moments and decoupled weight decay on the
/// parameters the layout marks as decayable.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
            decay: params.layout().decays(),
        }
    }

    pub fn from_state(params: &PolicyParams, m: Vec<f64>, v: Vec<f64>, t: u64) -> Self {
        Self {
            m,
            v,
            t,
            decay: params.layout().decays(),
        }
    }

    /// Gradient descent step on `grads` (the gradient of a loss to minimize).
    pub fn step(&mut self, params: &mut PolicyParams, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_b1, cfg.adam_b2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let p = params.as_mut_slice();
        for i in 0..p.len() {
            let g = grads.data[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
            let decay = if self.decay[i] { cfg.weight_decay * p[i] } else { 0.0 };
            p[i] -= lr * (update + decay);
        }
        params.bump_version();
    }
}
