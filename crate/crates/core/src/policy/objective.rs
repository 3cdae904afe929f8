use rayon::prelude::*;

use super::forward::Trace;
use super::{Gradients, PolicyParams};
use crate::error::{Error, Result};
use crate::math::add_assign;
use crate::vocab::TokenId;

/// A token sequence whose tail `tokens[target_start..]` is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<TokenId>,
    pub target_start: usize,
}

impl ScoredSequence {
    pub fn new(context: &[TokenId], target: &[TokenId]) -> Self {
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(target);
        Self {
            tokens,
            target_start: context.len(),
        }
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.tokens[self.target_start..]
    }
}

/// Per-token loss supplied by a caller, evaluated on the logits row that
/// predicts target token `k` of sequence `seq`.
pub trait TokenObjective: Sync {
    /// Returns the loss contribution and writes its gradient with respect to
    /// `logits` into `grad` (which arrives zeroed).
    fn term(&self, seq: usize, k: usize, target: TokenId, logits: &[f64], grad: &mut [f64]) -> f64;
}

const SEQS_PER_TASK: usize = 8;

/// Sums the objective over every target token of every sequence and
/// differentiates it with respect to all parameters.
///
/// Work is split into fixed-size chunks whose partial gradients are summed
/// in chunk order, so the result does not depend on the thread count.
pub fn loss_and_grads(
    params: &PolicyParams,
    seqs: &[ScoredSequence],
    objective: &dyn TokenObjective,
) -> Result<(f64, Gradients)> {
    let v = params.config().vocab_size;
    let partials: Vec<Result<(f64, Vec<f64>)>> = seqs
        .par_chunks(SEQS_PER_TASK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut grads = params.zero_grads();
            let mut loss = 0.0;
            for (offset, seq) in chunk.iter().enumerate() {
                let s = chunk_idx * SEQS_PER_TASK + offset;
                let n_targets = seq.tokens.len() - seq.target_start;
                if n_targets == 0 {
                    continue;
                }
                if seq.target_start == 0 {
                    return Err(Error::Format(format!("sequence {s}: target has no context")));
                }
                // The last target token is never an input.
                let inputs = &seq.tokens[..seq.tokens.len() - 1];
                let trace = Trace::run(params, inputs, seq.target_start - 1)?;
                let mut dlogits = vec![0.0; n_targets * v];
                for k in 0..n_targets {
                    let pos = seq.target_start - 1 + k;
                    let target = seq.tokens[seq.target_start + k];
                    let term = objective.term(s, k, target, trace.logits_at(pos), &mut dlogits[k * v..(k + 1) * v]);
                    if !term.is_finite() {
                        return Err(Error::numeric(format!("loss term of sequence {s}, token {k}")));
                    }
                    loss += term;
                }
                if dlogits.iter().any(|&g| g != 0.0) {
                    trace.backward(params, &dlogits, &mut grads);
                }
            }
            Ok((loss, grads.data))
        })
        .collect();

    let mut total = 0.0;
    let mut grads = params.zero_grads();
    for part in partials {
        let (l, g) = part?;
        total += l;
        add_assign(&mut grads.data, &g);
    }
    if !total.is_finite() {
        return Err(Error::numeric("total loss"));
    }
    if let Some(i) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("gradient entry {i}")));
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_softmax;
    use crate::policy::ModelConfig;

    struct WeightedNll(Vec<f64>);

    impl TokenObjective for WeightedNll {
        fn term(&self, seq: usize, _k: usize, target: TokenId, logits: &[f64], grad: &mut [f64]) -> f64 {
            let w = self.0[seq];
            let lp = log_softmax(logits);
            for (g, l) in grad.iter_mut().zip(&lp) {
                *g = w * l.exp();
            }
            grad[target.index()] -= w;
            -w * lp[target.index()]
        }
    }

    fn params() -> PolicyParams {
        PolicyParams::init(ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            context_window: 16,
            tie_embeddings: true,
            seed: 2,
        })
        .unwrap()
    }

    fn seq(a: u32) -> ScoredSequence {
        ScoredSequence::new(&[TokenId(a), TokenId(3)], &[TokenId(5), TokenId(1)])
    }

    #[test]
    fn zero_weights_give_zero_loss_and_grads() {
        let p = params();
        let (loss, g) = loss_and_grads(&p, &[seq(2), seq(4)], &WeightedNll(vec![0.0, 0.0])).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_entry_doubles_contribution() {
        let p = params();
        let (l1, g1) = loss_and_grads(&p, &[seq(2)], &WeightedNll(vec![1.0])).unwrap();
        let (l2, g2) = loss_and_grads(&p, &[seq(2), seq(2)], &WeightedNll(vec![1.0, 1.0])).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn result_independent_of_chunking() {
        let p = params();
        let seqs: Vec<_> = (0..19).map(|i| seq(i % 16)).collect();
        let w: Vec<f64> = (0..19).map(|i| (i as f64 * 0.3).sin()).collect();
        let (l, g) = loss_and_grads(&p, &seqs, &WeightedNll(w.clone())).unwrap();
        let mut gl = 0.0;
        let mut gg = p.zero_grads();
        for (i, s) in seqs.iter().enumerate() {
            let mut wi = vec![0.0; 1];
            wi[0] = w[i];
            let (li, g_i) = loss_and_grads(&p, std::slice::from_ref(s), &WeightedNll(wi)).unwrap();
            gl += li;
            add_assign(&mut gg.data, &g_i.data);
        }
        assert!((l - gl).abs() < 1e-12);
        for (a, b) in g.data.iter().zip(&gg.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_term_is_reported() {
        struct Bad;
        impl TokenObjective for Bad {
            fn term(&self, _: usize, _: usize, _: TokenId, _: &[f64], _: &mut [f64]) -> f64 {
                f64::NAN
            }
        }
        let p = params();
        let err = loss_and_grads(&p, &[seq(2)], &Bad).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
