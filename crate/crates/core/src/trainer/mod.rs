//! Group-relative policy optimization over turn samples.

mod buffer;
mod optim;
mod run;
mod surrogate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::SamplingParams;

pub use buffer::{build_optim_batch, dynamic_filter, group_survives, Buffer, Fill, OptimBatch, ScoredGroup};
pub use optim::{lr_at, AdamW};
pub use run::{evaluate, EvalReport, StepMetrics, Trainer, TrainerSnapshot};
pub use surrogate::{reference_rows, surrogate_stats, Surrogate, SurrogateStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub max_grad_norm: Option<f64>,
    pub group_size: usize,
    pub rollout_batch: usize,
    /// Turn samples per optimization batch; `rollout_batch * group_size` when unset.
    pub buffer_target: Option<usize>,
    pub inner_epochs: usize,
    pub total_steps: u64,
    /// Rollout rounds allowed per step before the step is skipped.
    pub max_rounds_per_step: usize,
    pub std_floor: f64,
    /// Multiplies the reward of truncated generations when set.
    pub overlong_decay: Option<f64>,
    pub sampling: SamplingParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 1e-3,
            learning_rate: 3e-4,
            adam_b1: 0.9,
            adam_b2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 20,
            max_grad_norm: Some(1.0),
            group_size: 8,
            rollout_batch: 8,
            buffer_target: None,
            inner_epochs: 1,
            total_steps: 200,
            max_rounds_per_step: 8,
            std_floor: 1e-6,
            overlong_decay: None,
            sampling: SamplingParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| if ok { Ok(()) } else { Err(Error::config(field, reason)) };
        check(self.eps_low > 0.0, "train.eps_low", "must be positive")?;
        check(self.eps_low <= self.eps_high, "train.eps_high", "must be at least eps_low")?;
        check(self.eps_high < 1.0, "train.eps_high", "must be below 1")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "train.beta", "must be non-negative")?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "train.learning_rate", "must be positive")?;
        check((0.0..1.0).contains(&self.adam_b1), "train.adam_b1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_b2), "train.adam_b2", "must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "train.adam_eps", "must be positive")?;
        check(self.weight_decay >= 0.0, "train.weight_decay", "must be non-negative")?;
        check(self.max_grad_norm.is_none_or(|g| g > 0.0), "train.max_grad_norm", "must be positive")?;
        check(self.group_size >= 2, "train.group_size", "must be at least 2")?;
        check(self.rollout_batch >= 1, "train.rollout_batch", "must be at least 1")?;
        check(self.buffer_target.is_none_or(|n| n >= 1), "train.buffer_target", "must be at least 1")?;
        check(self.inner_epochs >= 1, "train.inner_epochs", "must be at least 1")?;
        check(self.max_rounds_per_step >= 1, "train.max_rounds_per_step", "must be at least 1")?;
        check(self.std_floor > 0.0, "train.std_floor", "must be positive")?;
        check(
            self.overlong_decay.is_none_or(|d| (0.0..=1.0).contains(&d)),
            "train.overlong_decay",
            "must lie in [0, 1]",
        )?;
        self.sampling.validate()
    }
}

/// `(R - mean) / max(std, std_floor)` with population statistics.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_success_advantages() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-6);
        let expect = [1.7321, -0.5774, -0.5774, -0.5774];
        for (x, e) in a.iter().zip(expect) {
            assert!((x - e).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_rewards_give_zero() {
        assert!(group_advantages(&[0.7; 6], 1e-6).iter().all(|&a| a == 0.0));
    }

    proptest! {
        #[test]
        fn standardized_moments(rs in prop::collection::vec(0.0f64..2.0, 2..60)) {
            let a = group_advantages(&rs, 1e-6);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let m = rs.iter().sum::<f64>() / n;
            let sd = (rs.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-6 {
                let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            eps_high: 0.1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.eps_high"));
        let bad = TrainConfig {
            group_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
