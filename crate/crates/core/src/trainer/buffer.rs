use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{group_advantages, TrainConfig};
use crate::credit::{assign_rewards, normalize_batch, RewardBatch, RewardMode, ScoreStats, TurnSample};
use crate::error::{Error, Result};
use crate::rollout::Episode;

/// True iff the group holds at least one success and at least one failure.
pub fn group_survives(outcomes: &[u8]) -> bool {
    let correct = outcomes.iter().filter(|&&r| r == 1).count();
    correct > 0 && correct < outcomes.len()
}

pub fn dynamic_filter(groups: Vec<Vec<Episode>>) -> Vec<Vec<Episode>> {
    groups
        .into_iter()
        .filter(|g| group_survives(&g.iter().map(|e| e.outcome_reward).collect::<Vec<_>>()))
        .collect()
}

/// The turn samples of one surviving query group, already teacher-scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub task_id: u64,
    pub samples: Vec<TurnSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    Ready(Vec<ScoredGroup>),
    NeedMore,
}

/// Accumulates surviving groups across rollout rounds until at least
/// `target` turn samples are held.
#[derive(Debug, Clone, Default)]
pub struct Buffer {
    target: usize,
    groups: Vec<ScoredGroup>,
    len: usize,
}

impl Buffer {
    pub fn new(target: usize) -> Self {
        Self {
            target: target.max(1),
            groups: Vec::new(),
            len: 0,
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Turn samples currently held.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, groups: Vec<ScoredGroup>) -> Fill {
        for g in groups {
            self.len += g.samples.len();
            self.groups.push(g);
        }
        if self.len >= self.target {
            self.len = 0;
            Fill::Ready(std::mem::take(&mut self.groups))
        } else {
            Fill::NeedMore
        }
    }
}

/// Rewards and advantages for one emitted buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimBatch {
    pub samples: Vec<TurnSample>,
    pub groups: Vec<Range<usize>>,
    pub score_stats: Option<ScoreStats>,
}

impl OptimBatch {
    pub fn num_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Normalizes scores over the whole batch, assigns rewards under `mode`, and
/// standardizes rewards within each query group.
pub fn build_optim_batch(groups: Vec<ScoredGroup>, mode: RewardMode, cfg: &TrainConfig) -> Result<OptimBatch> {
    let mut ranges = Vec::with_capacity(groups.len());
    let mut samples = Vec::new();
    for g in groups {
        let start = samples.len();
        samples.extend(g.samples);
        ranges.push(start..samples.len());
    }
    let mut batch = RewardBatch::new(samples);
    normalize_batch(&mut batch);
    assign_rewards(&mut batch, mode)?;
    if let Some(decay) = cfg.overlong_decay {
        for s in batch.samples.iter_mut().filter(|s| s.truncated) {
            s.reward *= decay;
        }
    }
    check_gating(&batch.samples, mode)?;
    for range in &ranges {
        let rewards: Vec<f64> = batch.samples[range.clone()].iter().map(|s| s.reward).collect();
        for (s, a) in batch.samples[range.clone()].iter_mut().zip(group_advantages(&rewards, cfg.std_floor)) {
            s.advantage = a;
        }
    }
    let score_stats = batch.score_stats();
    Ok(OptimBatch {
        samples: batch.samples,
        groups: ranges,
        score_stats,
    })
}

/// In gated modes a failed rollout must carry zero reward on every turn.
pub fn check_gating(samples: &[TurnSample], mode: RewardMode) -> Result<()> {
    if !mode.is_gated() {
        return Ok(());
    }
    match samples.iter().position(|s| s.r == 0 && s.reward != 0.0) {
        Some(i) => Err(Error::Mode {
            mode: mode.to_string(),
            reason: format!("sample {i} failed but has reward {}", samples[i].reward),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(r: u8, p: f64, is_answer: bool) -> TurnSample {
        TurnSample {
            query_index: 0,
            rollout: 0,
            turn: 0,
            is_answer,
            context: vec![],
            tokens: vec![crate::vocab::TokenId(9)],
            logprobs_old: vec![-1.0],
            truncated: false,
            teacher_context: vec![],
            p: (!is_answer).then_some(p),
            p_hat: is_answer.then_some(1.0),
            r,
            reward: 0.0,
            advantage: 0.0,
        }
    }

    fn group(outcomes: &[u8], turns: usize, rng: &mut ChaCha8Rng) -> ScoredGroup {
        let mut samples = Vec::new();
        for &r in outcomes {
            for _ in 0..turns {
                samples.push(sample(r, rng.gen_range(0.01..1.0), false));
            }
            samples.push(sample(r, 0.0, true));
        }
        ScoredGroup { task_id: 0, samples }
    }

    #[test]
    fn filter_cases() {
        assert!(!group_survives(&[1; 8]));
        assert!(!group_survives(&[0; 8]));
        assert!(group_survives(&[1, 0, 0, 0, 0, 0, 0, 0]));
    }

    #[test]
    fn buffer_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = Buffer::new(10);
        assert_eq!(buf.push(vec![]), Fill::NeedMore);
        assert!(buf.is_empty());
        assert_eq!(buf.push(vec![group(&[1, 0], 2, &mut rng)]), Fill::NeedMore);
        assert_eq!(buf.len(), 6);
        match buf.push(vec![group(&[0, 1], 1, &mut rng)]) {
            Fill::Ready(gs) => assert_eq!(gs.iter().map(|g| g.samples.len()).sum::<usize>(), 10),
            Fill::NeedMore => panic!("exactly the target must emit"),
        }
        assert!(buf.is_empty());
    }

    #[test]
    fn failed_rollouts_get_negative_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut outcomes: Vec<u8> = (0..8).map(|_| rng.gen_range(0..2)).collect();
            outcomes[0] = 1;
            outcomes[1] = 0;
            let groups = vec![group(&outcomes, 4, &mut rng), group(&[1, 0, 1, 0, 0, 0, 0, 0], 4, &mut rng)];
            let batch = build_optim_batch(groups, RewardMode::Tamtrl, &TrainConfig::default()).unwrap();
            for range in &batch.groups {
                let g = &batch.samples[range.clone()];
                let mean: f64 = g.iter().map(|s| s.advantage).sum::<f64>() / g.len() as f64;
                assert!(mean.abs() < 1e-9);
                for s in g.iter().filter(|s| s.r == 0) {
                    assert!(s.advantage < 0.0);
                }
            }
        }
    }

    #[test]
    fn uniform_scores_leave_only_outcome_signal() {
        let mut samples = Vec::new();
        for r in [1u8, 1] {
            for _ in 0..3 {
                samples.push(sample(r, 0.4, false));
            }
            samples.push(sample(r, 0.0, true));
        }
        let batch = build_optim_batch(vec![ScoredGroup { task_id: 0, samples }], RewardMode::Tamtrl, &TrainConfig::default())
            .unwrap();
        let memory_rewards: Vec<f64> = batch.samples.iter().filter(|s| !s.is_answer).map(|s| s.reward).collect();
        assert!(memory_rewards.iter().all(|&r| r == 0.5));
        assert!(!group_survives(&[1, 1]));
    }
}
