use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::Trace;
use super::PolicyParams;
use crate::error::{Error, Result};
use crate::math::{log_softmax, softmax};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplingParams {
    pub fn new(temperature: f64, top_p: f64) -> Result<Self> {
        let s = Self { temperature, top_p };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("sampling.temperature", "must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("sampling.top_p", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

/// One sampled continuation.
///
/// `logprobs_old[i]` is the log-probability of `tokens[i]` under the full
/// temperature-1 softmax of the sampling policy, before any nucleus
/// truncation, so importance ratios stay defined for every token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub logprobs_old: Vec<f64>,
    pub truncated: bool,
}

impl Generation {
    /// Generated tokens up to, not including, the first EOS.
    pub fn content(&self, eos: TokenId) -> &[TokenId] {
        let end = self.tokens.iter().position(|&t| t == eos).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

/// Autoregressive nucleus sampling; stops at `eos` or after `max_new` tokens.
pub fn sample<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_new: usize,
    sampling: SamplingParams,
    eos: TokenId,
    rng: &mut R,
) -> Result<Generation> {
    sampling.validate()?;
    let window = params.config().context_window;
    if prompt.len() > window {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            window,
            turn: None,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::with_capacity(max_new),
        logprobs_old: Vec::with_capacity(max_new),
        truncated: true,
    };
    for _ in 0..max_new {
        let trace = Trace::run(params, &seq, seq.len() - 1)?;
        let logits = trace.logits_at(seq.len() - 1);
        let tok = draw(logits, sampling, rng);
        out.logprobs_old.push(log_softmax(logits)[tok]);
        let tok = TokenId(tok as u32);
        out.tokens.push(tok);
        if tok == eos {
            out.truncated = false;
            break;
        }
        seq.push(tok);
        if seq.len() > window {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                window,
                turn: None,
            });
        }
    }
    Ok(out)
}

/// Draws one index from `softmax(logits / temperature)` restricted to its
/// top-p nucleus. Ties in probability are broken by lower index.
fn draw<R: Rng + ?Sized>(logits: &[f64], sampling: SamplingParams, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / sampling.temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    if sampling.top_p >= 1.0 {
        return pick(probs.iter().copied().enumerate(), 1.0, u);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= sampling.top_p {
            break;
        }
    }
    pick(order[..kept].iter().map(|&i| (i, probs[i])), mass, u)
}

fn pick(items: impl Iterator<Item = (usize, f64)>, total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in items {
        acc += p;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Probability of each `target` token given `context` and the target prefix
/// before it, from one forward pass over `context ++ target`.
pub fn teacher_forced_probs(params: &PolicyParams, context: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>> {
    Ok(teacher_forced_rows(params, context, target)?
        .into_iter()
        .zip(target)
        .map(|(row, t)| row[t.index()])
        .collect())
}

/// Full next-token distributions at every target position.
pub fn teacher_forced_rows(params: &PolicyParams, context: &[TokenId], target: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    if context.is_empty() {
        return Err(Error::Format("teacher forcing needs a nonempty context".into()));
    }
    if target.is_empty() {
        return Ok(Vec::new());
    }
    let mut seq = Vec::with_capacity(context.len() + target.len());
    seq.extend_from_slice(context);
    // The last target token is never an input.
    seq.extend_from_slice(&target[..target.len() - 1]);
    let start = context.len() - 1;
    let trace = Trace::run(params, &seq, start)?;
    Ok((start..seq.len()).map(|i| softmax(trace.logits_at(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward_logits, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> PolicyParams {
        let mut p = PolicyParams::init(ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_window: 24,
            tie_embeddings: true,
            seed: 3,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for x in p.as_mut_slice() {
            *x += rng.gen_range(-0.5..0.5);
        }
        p
    }

    const EOS: TokenId = TokenId(1);

    #[test]
    fn empirical_frequencies_match_softmax() {
        let p = params();
        let prompt = [TokenId(4), TokenId(9), TokenId(2)];
        let probs = softmax(forward_logits(&p, &prompt).unwrap().last().unwrap());
        let n = 10_000usize;
        let mut counts = vec![0usize; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..n {
            let g = sample(&p, &prompt, 1, SamplingParams::default(), EOS, &mut rng).unwrap();
            counts[g.tokens[0].index()] += 1;
        }
        for (c, &q) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * q * (1.0 - q)).sqrt();
            assert!((*c as f64 - n as f64 * q).abs() <= 3.0 * sigma + 1.0, "count {c} vs {q}");
        }
    }

    #[test]
    fn tiny_nucleus_is_greedy() {
        let mut p = params();
        // Make token 7 strictly dominant everywhere via the output bias path.
        let e = p.layout().tok_emb;
        let d = p.config().d_model;
        let lnf_b = p.layout().lnf_b;
        for j in 0..d {
            p.as_mut_slice()[lnf_b + j] = 5.0;
            p.as_mut_slice()[e + 7 * d + j] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = sample(&p, &[TokenId(3)], 1, SamplingParams::new(1.0, 1e-4).unwrap(), EOS, &mut rng)
                .unwrap();
            assert_eq!(g.tokens, vec![TokenId(7)]);
        }
    }

    #[test]
    fn zero_budget_is_truncated_and_empty() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample(&p, &[TokenId(3)], 0, SamplingParams::default(), EOS, &mut rng).unwrap();
        assert!(g.tokens.is_empty() && g.truncated);
    }

    #[test]
    fn oversize_prompt_rejected() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prompt = vec![TokenId(3); 25];
        assert!(matches!(
            sample(&p, &prompt, 1, SamplingParams::default(), EOS, &mut rng),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn scoring_reproduces_sampling_logprobs() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prompt = [TokenId(2), TokenId(5), TokenId(11)];
        for _ in 0..20 {
            let g = sample(&p, &prompt, 6, SamplingParams::default(), EOS, &mut rng).unwrap();
            assert_eq!(g.tokens.len(), g.logprobs_old.len());
            assert!(g.logprobs_old.iter().all(|&l| l <= 0.0));
            let probs = teacher_forced_probs(&p, &prompt, &g.tokens).unwrap();
            for (pr, lp) in probs.iter().zip(&g.logprobs_old) {
                assert!((pr - lp.exp()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn teacher_forcing_matches_per_position_recompute() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ctx: Vec<TokenId> = (0..rng.gen_range(1..8)).map(|_| TokenId(rng.gen_range(0..16))).collect();
            let tgt: Vec<TokenId> = (0..rng.gen_range(1..6)).map(|_| TokenId(rng.gen_range(0..16))).collect();
            let fast = teacher_forced_probs(&p, &ctx, &tgt).unwrap();
            let rows = teacher_forced_rows(&p, &ctx, &tgt).unwrap();
            for (i, t) in tgt.iter().enumerate() {
                let mut prefix = ctx.clone();
                prefix.extend_from_slice(&tgt[..i]);
                let naive = softmax(forward_logits(&p, &prefix).unwrap().last().unwrap());
                assert!((naive[t.index()] - fast[i]).abs() < 1e-9);
                assert!(fast[i] > 0.0 && fast[i] <= 1.0);
                assert!((rows[i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_target_is_softmax_of_context() {
        let p = params();
        let ctx = [TokenId(3), TokenId(12)];
        let expect = softmax(forward_logits(&p, &ctx).unwrap().last().unwrap())[9];
        let got = teacher_forced_probs(&p, &ctx, &[TokenId(9)]).unwrap()[0];
        assert_eq!(got, expect);
    }
}
