use rayon::prelude::*;

use super::{OptimBatch, TrainConfig};
use crate::error::{Error, Result};
use crate::math::log_softmax;
use crate::policy::{teacher_forced_rows, PolicyParams, ScoredSequence, TokenObjective};
use crate::vocab::TokenId;

/// Reference log-probability rows for every generated token of every sample.
pub fn reference_rows(reference: &PolicyParams, batch: &OptimBatch) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .samples
        .par_iter()
        .map(|s| {
            Ok(teacher_forced_rows(reference, &s.context, &s.tokens)?
                .into_iter()
                .map(|row| row.into_iter().map(f64::ln).collect())
                .collect())
        })
        .collect()
}

/// Clipped token-level surrogate minus the exact KL to the reference,
/// averaged over all generated tokens. As a [`TokenObjective`] it reports
/// the negation, which descent minimizes.
pub struct Surrogate<'a> {
    pub batch: &'a OptimBatch,
    pub ref_rows: &'a [Vec<Vec<f64>>],
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    inv_tokens: f64,
}

/// Value of one token's term with its derivatives.
struct TokenTerm {
    clipped: f64,
    d_logp: f64,
    kl: f64,
    was_clipped: bool,
}

impl<'a> Surrogate<'a> {
    pub fn new(batch: &'a OptimBatch, ref_rows: &'a [Vec<Vec<f64>>], cfg: &TrainConfig) -> Self {
        let tokens = batch.num_tokens().max(1);
        Self {
            batch,
            ref_rows,
            eps_low: cfg.eps_low,
            eps_high: cfg.eps_high,
            beta: cfg.beta,
            inv_tokens: 1.0 / tokens as f64,
        }
    }

    pub fn sequences(&self) -> Vec<ScoredSequence> {
        self.batch
            .samples
            .iter()
            .map(|s| ScoredSequence::new(&s.context, &s.tokens))
            .collect()
    }

    fn evaluate(&self, seq: usize, k: usize, target: TokenId, lsm: &[f64]) -> TokenTerm {
        let s = &self.batch.samples[seq];
        let a = s.advantage;
        let ratio = (lsm[target.index()] - s.logprobs_old[k]).exp();
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - self.eps_low, 1.0 + self.eps_high) * a;
        let (value, d_logp, was_clipped) = if unclipped <= clipped {
            (unclipped, ratio * a, false)
        } else {
            (clipped, 0.0, true)
        };
        let kl = if self.beta > 0.0 {
            let r = &self.ref_rows[seq][k];
            lsm.iter().zip(r).map(|(l, q)| l.exp() * (l - q)).sum()
        } else {
            0.0
        };
        TokenTerm {
            clipped: value,
            d_logp,
            kl,
            was_clipped,
        }
    }
}

impl TokenObjective for Surrogate<'_> {
    fn term(&self, seq: usize, k: usize, target: TokenId, logits: &[f64], grad: &mut [f64]) -> f64 {
        let lsm = log_softmax(logits);
        let t = self.evaluate(seq, k, target, &lsm);
        let w = self.inv_tokens;
        // d/dz of log p(target) is onehot - p; d/dz of KL is p * (log p - log q - KL).
        for (j, g) in grad.iter_mut().enumerate() {
            let p = lsm[j].exp();
            let mut d = -t.d_logp * p;
            if self.beta > 0.0 {
                d -= self.beta * p * (lsm[j] - self.ref_rows[seq][k][j] - t.kl);
            }
            *g = -w * d;
        }
        grad[target.index()] -= w * t.d_logp;
        -w * (t.clipped - self.beta * t.kl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SurrogateStats {
    /// The maximized objective.
    pub objective: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub ratio_mean: f64,
}

/// Forward-only evaluation of the surrogate at `params`.
pub fn surrogate_stats(params: &PolicyParams, surrogate: &Surrogate<'_>) -> Result<SurrogateStats> {
    let per_sample: Vec<Result<(f64, f64, usize, f64)>> = surrogate
        .batch
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rows = teacher_forced_rows(params, &s.context, &s.tokens)?;
            let (mut obj, mut kl, mut clipped, mut ratio) = (0.0, 0.0, 0usize, 0.0);
            for (k, (row, &tok)) in rows.iter().zip(&s.tokens).enumerate() {
                let lsm: Vec<f64> = row.iter().map(|p| p.ln()).collect();
                let t = surrogate.evaluate(i, k, tok, &lsm);
                if !t.clipped.is_finite() {
                    return Err(Error::numeric(format!("importance ratio of sample {i}, token {k}")));
                }
                obj += t.clipped - surrogate.beta * t.kl;
                kl += t.kl;
                clipped += t.was_clipped as usize;
                ratio += (lsm[tok.index()] - s.logprobs_old[k]).exp();
            }
            Ok((obj, kl, clipped, ratio))
        })
        .collect();
    let mut out = SurrogateStats::default();
    for part in per_sample {
        let (o, k, c, r) = part?;
        out.objective += o;
        out.kl_mean += k;
        out.clip_fraction += c as f64;
        out.ratio_mean += r;
    }
    let w = surrogate.inv_tokens;
    out.objective *= w;
    out.kl_mean *= w;
    out.clip_fraction *= w;
    out.ratio_mean *= w;
    Ok(out)
}
