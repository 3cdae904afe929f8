//! Tiny decoder-only transformer over the closed vocabulary.
//!
//! One parameter set plays every role in training: the live student, the
//! frozen rollout policy that also scores memories as teacher, and the fixed
//! reference policy for the KL penalty. Roles differ only by which snapshot
//! is used and what context it is given.
//!
//! All arithmetic is `f64` and every gradient is written out by hand; see
//! [`forward`] for the layer equations.

mod checkpoint;
pub mod forward;
mod objective;
mod sample;

use std::ops::Deref;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward_logits, Trace};
pub use objective::{loss_and_grads, ScoredSequence, TokenObjective};
pub use sample::{sample, teacher_forced_probs, teacher_forced_rows, Generation, SamplingParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward block.
    pub d_ff: usize,
    pub context_window: usize,
    /// Share the token embedding with the output projection.
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 135,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context_window: 512,
            tie_embeddings: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 16 {
            return Err(Error::config("model.vocab_size", "must be at least 16"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::config("model", "n_layers and d_ff must be positive"));
        }
        if self.context_window < 2 {
            return Err(Error::config("model.context_window", "must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: Option<usize>,
    pub total: usize,
    tensors: Vec<(TensorInfo, Init)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f, w) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.context_window);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push((TensorInfo { name, offset, shape }, init));
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d], Init::Normal);
        let pos_emb = push("pos_emb".into(), vec![w, d], Init::Normal);
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockLayout {
                ln1_g: push(format!("h{l}.ln1.g"), vec![d], Init::One),
                ln1_b: push(format!("h{l}.ln1.b"), vec![d], Init::Zero),
                w_qkv: push(format!("h{l}.attn.w_qkv"), vec![d, 3 * d], Init::Normal),
                b_qkv: push(format!("h{l}.attn.b_qkv"), vec![3 * d], Init::Zero),
                w_o: push(format!("h{l}.attn.w_o"), vec![d, d], Init::Normal),
                b_o: push(format!("h{l}.attn.b_o"), vec![d], Init::Zero),
                ln2_g: push(format!("h{l}.ln2.g"), vec![d], Init::One),
                ln2_b: push(format!("h{l}.ln2.b"), vec![d], Init::Zero),
                w_fc: push(format!("h{l}.mlp.w_fc"), vec![d, f], Init::Normal),
                b_fc: push(format!("h{l}.mlp.b_fc"), vec![f], Init::Zero),
                w_proj: push(format!("h{l}.mlp.w_proj"), vec![f, d], Init::Normal),
                b_proj: push(format!("h{l}.mlp.b_proj"), vec![d], Init::Zero),
            })
            .collect();
        let lnf_g = push("lnf.g".into(), vec![d], Init::One);
        let lnf_b = push("lnf.b".into(), vec![d], Init::Zero);
        let w_out = (!cfg.tie_embeddings).then(|| push("w_out".into(), vec![d, v], Init::Normal));
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            total,
            tensors,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.iter().map(|(t, _)| t)
    }

    /// Whether weight decay applies at a flat index (matrices and embeddings only).
    pub fn decays(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for (t, init) in &self.tensors {
            if *init == Init::Normal {
                let n: usize = t.shape.iter().product();
                mask[t.offset..t.offset + n].fill(true);
            }
        }
        mask
    }
}

/// Live, mutable network weights.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    config: ModelConfig,
    layout: Arc<Layout>,
    data: Vec<f64>,
    version: u64,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.version == other.version && self.data == other.data
    }
}

/// Initialization standard deviation for weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

impl PolicyParams {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let mut data = vec![0.0; layout.total];
        for (t, init) in &layout.tensors {
            let n: usize = t.shape.iter().product();
            let slot = &mut data[t.offset..t.offset + n];
            match init {
                Init::Normal => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                Init::Zero => slot.fill(0.0),
                Init::One => slot.fill(1.0),
            }
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            data,
            version: 0,
        })
    }

    pub(crate) fn from_raw(config: ModelConfig, data: Vec<f64>, version: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            data,
            version,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the raw weights. Does not advance the version.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Deep, immutable copy that later updates to `self` cannot reach.
    pub fn snapshot(&self) -> FrozenParams {
        FrozenParams(Arc::new(self.clone()))
    }

    /// Zeroed gradient buffer with this parameter layout.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            data: vec![0.0; self.data.len()],
        }
    }
}

/// Read-only shared snapshot of [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct FrozenParams(Arc<PolicyParams>);

impl FrozenParams {
    pub fn snapshot(&self) -> FrozenParams {
        FrozenParams(Arc::new((*self.0).clone()))
    }

    pub fn thaw(&self) -> PolicyParams {
        (*self.0).clone()
    }
}

impl Deref for FrozenParams {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

/// Gradient with the same flat layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}
