//! Turn-level credit from teacher probabilities, plus answer metrics.
//!
//! Each memory write `M_{t+1}` is scored by how likely the same network finds
//! it when shown only the relevant part of the chunk. Scores are min-max
//! normalized over the batch and gated by the episode's final correctness.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{teacher_forced_probs, PolicyParams};
use crate::rollout::{turn_context, Episode};
use crate::synth::{filtered_chunk, TaskInstance};
use crate::vocab::{Specials, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Tamtrl,
    OutcomeOnly,
    NoLnorm,
    NoMmnorm,
    GlobalReward,
    PlusReward,
}

impl RewardMode {
    pub const ALL: [RewardMode; 6] = [
        RewardMode::Tamtrl,
        RewardMode::OutcomeOnly,
        RewardMode::NoLnorm,
        RewardMode::NoMmnorm,
        RewardMode::GlobalReward,
        RewardMode::PlusReward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Tamtrl => "tamtrl",
            RewardMode::OutcomeOnly => "outcome_only",
            RewardMode::NoLnorm => "no_lnorm",
            RewardMode::NoMmnorm => "no_mmnorm",
            RewardMode::GlobalReward => "global_reward",
            RewardMode::PlusReward => "plus_reward",
        }
    }

    /// Whether memory turns need a teacher score at all.
    pub fn uses_teacher(self) -> bool {
        self != RewardMode::OutcomeOnly
    }

    /// Whether `r = 0` forces every turn reward of that rollout to zero.
    pub fn is_gated(self) -> bool {
        !matches!(self, RewardMode::PlusReward)
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Mode {
                mode: s.to_string(),
                reason: format!(
                    "unknown mode; expected one of {}",
                    RewardMode::ALL.map(|m| m.as_str()).join(", ")
                ),
            })
    }
}

/// One optimization unit: a memory write, or the final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSample {
    pub query_index: usize,
    pub rollout: usize,
    pub turn: usize,
    pub is_answer: bool,
    /// Prompt the tokens were sampled from.
    pub context: Vec<TokenId>,
    /// Sampled tokens, including a trailing EOS when one was emitted.
    pub tokens: Vec<TokenId>,
    pub logprobs_old: Vec<f64>,
    pub truncated: bool,
    /// Privileged prompt used for scoring; empty for the answer step.
    pub teacher_context: Vec<TokenId>,
    pub p: Option<f64>,
    pub p_hat: Option<f64>,
    pub r: u8,
    pub reward: f64,
    pub advantage: f64,
}

/// Every sample of one optimization batch with its raw-score range.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBatch {
    pub samples: Vec<TurnSample>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl RewardBatch {
    pub fn new(samples: Vec<TurnSample>) -> Self {
        Self {
            samples,
            p_min: None,
            p_max: None,
        }
    }

    pub fn score_stats(&self) -> Option<ScoreStats> {
        let ps: Vec<f64> = self.samples.iter().filter_map(|s| s.p).collect();
        if ps.is_empty() {
            return None;
        }
        Some(ScoreStats {
            min: ps.iter().copied().fold(f64::INFINITY, f64::min),
            max: ps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: ps.iter().sum::<f64>() / ps.len() as f64,
        })
    }
}

/// Tokens scored for a memory write: its content, or EOS alone when the
/// write is empty, so the average is always over at least one token.
pub fn scored_memory(tokens: &[TokenId], eos: TokenId) -> Vec<TokenId> {
    let end = tokens.iter().position(|&t| t == eos).unwrap_or(tokens.len());
    if end == 0 {
        vec![eos]
    } else {
        tokens[..end].to_vec()
    }
}

/// Mean (or, with `length_norm` off, summed) teacher-forced probability of
/// `m_next` given `[q, C_t, M_t]`.
pub fn teacher_score(
    params: &PolicyParams,
    specials: &Specials,
    query: &[TokenId],
    c_t: &[TokenId],
    m_t: &[TokenId],
    m_next: &[TokenId],
    length_norm: bool,
) -> Result<f64> {
    let target = scored_memory(m_next, specials.eos);
    let ctx = turn_context(specials, query, c_t, m_t);
    let probs = teacher_forced_probs(params, &ctx, &target)?;
    let sum: f64 = probs.iter().sum();
    Ok(if length_norm { sum / probs.len() as f64 } else { sum })
}

/// Builds the `(n + 1) * G` samples of one query's group. Memory turns are
/// scored with `teacher` when the mode calls for it.
pub fn build_samples(
    teacher: &PolicyParams,
    specials: &Specials,
    task: &TaskInstance,
    episodes: &[Episode],
    mode: RewardMode,
) -> Result<Vec<TurnSample>> {
    let global_c = task.relevant_tokens();
    episodes
        .par_iter()
        .map(|ep| -> Result<Vec<TurnSample>> {
            let r = ep.outcome_reward;
            let mut out = Vec::with_capacity(ep.turns.len() + 1);
            for turn in &ep.turns {
                let c_t = match mode {
                    RewardMode::GlobalReward => global_c.clone(),
                    _ => filtered_chunk(task, turn.chunk_span)?,
                };
                let teacher_context = turn_context(specials, &task.query, &c_t, &turn.memory_in);
                let p = if mode.uses_teacher() {
                    let s = teacher_score(
                        teacher,
                        specials,
                        &task.query,
                        &c_t,
                        &turn.memory_in,
                        &turn.memory_out.tokens,
                        mode != RewardMode::NoLnorm,
                    )
                    .map_err(|e| e.at_turn(turn.turn_index))?;
                    Some(s)
                } else {
                    None
                };
                out.push(TurnSample {
                    query_index: ep.query_index,
                    rollout: ep.group_index,
                    turn: turn.turn_index,
                    is_answer: false,
                    context: turn.student_context.clone(),
                    tokens: turn.memory_out.tokens.clone(),
                    logprobs_old: turn.memory_out.logprobs_old.clone(),
                    truncated: turn.memory_out.truncated,
                    teacher_context,
                    p,
                    p_hat: None,
                    r,
                    reward: 0.0,
                    advantage: 0.0,
                });
            }
            out.push(TurnSample {
                query_index: ep.query_index,
                rollout: ep.group_index,
                turn: ep.turns.len(),
                is_answer: true,
                context: ep.answer_context.clone(),
                tokens: ep.answer.tokens.clone(),
                logprobs_old: ep.answer.logprobs_old.clone(),
                truncated: ep.answer.truncated,
                teacher_context: Vec::new(),
                p: None,
                p_hat: Some(1.0),
                r,
                reward: 0.0,
                advantage: 0.0,
            });
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Min-max normalizes every raw score in the batch into `p_hat`. A batch
/// whose scores are all equal maps to 0.5 throughout.
pub fn normalize_batch(batch: &mut RewardBatch) {
    let Some(stats) = batch.score_stats() else {
        batch.p_min = None;
        batch.p_max = None;
        return;
    };
    let range = stats.max - stats.min;
    for s in &mut batch.samples {
        if let Some(p) = s.p {
            s.p_hat = Some(if range > 0.0 {
                ((p - stats.min) / range).clamp(0.0, 1.0)
            } else {
                0.5
            });
        }
    }
    batch.p_min = Some(stats.min);
    batch.p_max = Some(stats.max);
}

pub fn assign_rewards(batch: &mut RewardBatch, mode: RewardMode) -> Result<()> {
    for (i, s) in batch.samples.iter_mut().enumerate() {
        let r = s.r as f64;
        if s.r > 1 {
            return Err(Error::Mode {
                mode: mode.to_string(),
                reason: format!("sample {i} has outcome {} outside {{0, 1}}", s.r),
            });
        }
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::Mode {
                mode: mode.to_string(),
                reason: format!("sample {i} (turn {}) has no {what}", s.turn),
            })
        };
        s.reward = match mode {
            RewardMode::OutcomeOnly => r,
            RewardMode::Tamtrl | RewardMode::NoLnorm | RewardMode::GlobalReward => need(s.p_hat, "normalized score")? * r,
            RewardMode::NoMmnorm => {
                if s.is_answer {
                    r
                } else {
                    need(s.p, "raw score")? * r
                }
            }
            RewardMode::PlusReward => need(s.p_hat, "normalized score")? + r,
        };
    }
    Ok(())
}

/// Drops padding and markers from a decoded prediction.
pub fn strip_specials(tokens: &[TokenId], specials: &Specials) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| !specials.contains(t)).collect()
}

pub fn exact_match(prediction: &[TokenId], answers: &[Vec<TokenId>]) -> u8 {
    answers.iter().any(|a| a.as_slice() == prediction) as u8
}

/// Fraction of answer items that appear somewhere in the prediction.
pub fn sub_em(prediction: &[TokenId], items: &BTreeSet<TokenId>) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let covered = items.iter().filter(|i| prediction.contains(i)).count();
    covered as f64 / items.len() as f64
}

/// Mean of `k` per-run scores.
pub fn average_at_k(runs: &[f64]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::config("eval.k", "must be at least 1"));
    }
    Ok(runs.iter().sum::<f64>() / runs.len() as f64)
}
