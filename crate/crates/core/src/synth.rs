//! Synthetic long-document QA tasks.
//!
//! A document is a sequence of fixed-length sentences. A small number of
//! them are relevant: each states one fact `[key rel value filler..]`. The
//! rest are distractors built from filler words with decoy keys and values
//! mixed in. The query names a key and the answer is the value reached by
//! following facts from it (one hop, or two in multi-hop mode).

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_sentences: usize,
    pub relevant_count: usize,
    pub sentence_len: usize,
    pub multi_hop: bool,
    /// Probability that a distractor is a well-formed fact about a decoy key.
    pub decoy_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sentences: 20,
            relevant_count: 1,
            sentence_len: 4,
            multi_hop: false,
            decoy_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.relevant_count < 1 || self.relevant_count >= self.num_sentences {
            return Err(Error::config(
                "synth.relevant_count",
                format!(
                    "need 1 <= relevant_count < num_sentences, got {} and {}",
                    self.relevant_count, self.num_sentences
                ),
            ));
        }
        if self.sentence_len < 3 {
            return Err(Error::config("synth.sentence_len", "must be at least 3"));
        }
        if self.multi_hop && self.relevant_count < 2 {
            return Err(Error::config(
                "synth.relevant_count",
                "multi-hop tasks need at least 2 relevant sentences",
            ));
        }
        if !(0.0..=1.0).contains(&self.decoy_rate) {
            return Err(Error::config("synth.decoy_rate", "must lie in [0, 1]"));
        }
        let keys_needed = if self.multi_hop { 3 } else { 2 };
        if vocab.keys().len() < keys_needed {
            return Err(Error::config("vocab.num_keys", "too few keys for this task"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<TokenId>,
    pub relevant: bool,
    pub fact: Option<(TokenId, TokenId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub schema_version: u32,
    pub id: u64,
    pub doc: Vec<TokenId>,
    pub sentence_spans: Vec<SentenceSpan>,
    pub query: Vec<TokenId>,
    pub answers: Vec<Vec<TokenId>>,
    pub num_sentences: usize,
}

impl TaskInstance {
    /// Tokens of every sentence, with relevance and extracted fact.
    pub fn sentences(&self) -> Vec<Sentence> {
        self.sentence_spans
            .iter()
            .map(|s| {
                let tokens = self.doc[s.start..s.end].to_vec();
                let fact = s.relevant.then(|| (tokens[0], tokens[2]));
                Sentence {
                    tokens,
                    relevant: s.relevant,
                    fact,
                }
            })
            .collect()
    }

    /// Distinct tokens across all ground-truth answers.
    pub fn answer_items(&self) -> BTreeSet<TokenId> {
        self.answers.iter().flatten().copied().collect()
    }

    /// Concatenation of every relevant sentence in document order.
    pub fn relevant_tokens(&self) -> Vec<TokenId> {
        self.sentence_spans
            .iter()
            .filter(|s| s.relevant)
            .flat_map(|s| self.doc[s.start..s.end].iter().copied())
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut cursor = 0;
        for s in &self.sentence_spans {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Format(format!(
                    "instance {}: sentence spans do not tile the document",
                    self.id
                )));
            }
            cursor = s.end;
        }
        if cursor != self.doc.len() {
            return Err(Error::Format(format!(
                "instance {}: sentence spans stop at {cursor} of {}",
                self.id,
                self.doc.len()
            )));
        }
        if !self.sentence_spans.iter().any(|s| s.relevant) {
            return Err(Error::Format(format!(
                "instance {}: no relevant sentence",
                self.id
            )));
        }
        if self.answers.is_empty() {
            return Err(Error::Format(format!("instance {}: no answers", self.id)));
        }
        Ok(())
    }
}

/// Relevant-sentence filter for one chunk.
///
/// A relevant sentence belongs to the chunk containing its first token, so a
/// sentence cut by a chunk boundary appears whole in the earlier chunk and
/// not at all in the later one.
pub fn filtered_chunk(task: &TaskInstance, span: (usize, usize)) -> Result<Vec<TokenId>> {
    let (start, end) = span;
    if start > end || end > task.doc.len() {
        return Err(Error::Span {
            start,
            end,
            len: task.doc.len(),
        });
    }
    Ok(task
        .sentence_spans
        .iter()
        .filter(|s| s.relevant && s.start >= start && s.start < end)
        .flat_map(|s| task.doc[s.start..s.end].iter().copied())
        .collect())
}

pub fn generate(cfg: &SynthConfig, vocab: &Vocabulary, n: usize) -> Result<Vec<TaskInstance>> {
    cfg.validate(vocab)?;
    if n == 0 {
        return Err(Error::config("n", "must generate at least one instance"));
    }
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i);
            generate_one(cfg, vocab, i, &mut rng)
        })
        .collect())
}

fn generate_one(cfg: &SynthConfig, vocab: &Vocabulary, id: u64, rng: &mut ChaCha8Rng) -> TaskInstance {
    let keys = vocab.keys();
    let rel = vocab.relation();
    let mut picked = keys.choose_multiple(rng, if cfg.multi_hop { 2 } else { 1 });
    let query_key = *picked.next().unwrap();
    let value = *vocab.values().choose(rng).unwrap();

    let facts: Vec<(TokenId, TokenId)> = if cfg.multi_hop {
        let bridge = *picked.next().unwrap();
        vec![(query_key, bridge), (bridge, value)]
    } else {
        vec![(query_key, value)]
    };
    let relevant_keys: BTreeSet<TokenId> = facts.iter().flat_map(|&(a, b)| [a, b]).collect();
    let decoy_keys: Vec<TokenId> = keys
        .iter()
        .copied()
        .filter(|k| !relevant_keys.contains(k))
        .collect();

    let mut slots: Vec<usize> = sample_indices(rng, cfg.num_sentences, cfg.relevant_count).into_vec();
    slots.sort_unstable();

    let fill = |rng: &mut ChaCha8Rng, out: &mut Vec<TokenId>, n: usize| {
        out.extend((0..n).map(|_| *vocab.fillers().choose(rng).unwrap()));
    };

    let mut doc = Vec::with_capacity(cfg.num_sentences * cfg.sentence_len);
    let mut spans = Vec::with_capacity(cfg.num_sentences);
    let mut next_fact = 0;
    for slot in 0..cfg.num_sentences {
        let start = doc.len();
        let relevant = slots.binary_search(&slot).is_ok();
        if relevant {
            // Extra relevant slots restate the facts in hop order.
            let (k, v) = facts[next_fact % facts.len()];
            next_fact += 1;
            doc.extend([k, rel, v]);
            fill(rng, &mut doc, cfg.sentence_len - 3);
        } else if rng.gen_bool(cfg.decoy_rate) {
            let k = *decoy_keys.choose(rng).unwrap();
            let v = *vocab.values().choose(rng).unwrap();
            doc.extend([k, rel, v]);
            fill(rng, &mut doc, cfg.sentence_len - 3);
        } else {
            fill(rng, &mut doc, cfg.sentence_len);
            let pos = start + rng.gen_range(0..cfg.sentence_len);
            doc[pos] = if rng.gen_bool(0.5) {
                *decoy_keys.choose(rng).unwrap()
            } else {
                *vocab.values().choose(rng).unwrap()
            };
        }
        spans.push(SentenceSpan {
            start,
            end: doc.len(),
            relevant,
        });
    }

    TaskInstance {
        schema_version: DATASET_SCHEMA_VERSION,
        id,
        doc,
        sentence_spans: spans,
        query: vec![query_key],
        answers: vec![vec![value]],
        num_sentences: cfg.num_sentences,
    }
}

pub fn write_dataset(path: impl AsRef<Path>, tasks: &[TaskInstance]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstance = serde_json::from_str(&line)?;
        if task.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "line {}: unsupported schema version {}",
                lineno + 1,
                task.schema_version
            )));
        }
        task.check_invariants()?;
        out.push(task);
    }
    Ok(out)
}
