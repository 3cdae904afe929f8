//! Run configuration: one TOML file, dotted-key overrides, and environment
//! overrides for output paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::credit::RewardMode;
use crate::error::{Error, Result};
use crate::policy::{ModelConfig, SamplingParams};
use crate::rollout::ChunkingConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;
use crate::vocab::{VocabConfig, Vocabulary};

/// Environment variables that may replace `io` paths.
pub const ENV_OVERRIDES: [(&str, &str); 3] = [
    ("TURNCREDIT_OUT_DIR", "out_dir"),
    ("TURNCREDIT_DATA_DIR", "data_dir"),
    ("TURNCREDIT_CHECKPOINT", "checkpoint"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 2000,
            eval_size: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { mode: RewardMode::Tamtrl }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub sampling: SamplingParams,
    /// Evaluate every this many steps during training; 0 disables.
    pub every: u64,
    /// Discount used by the answerability probe in traces.
    pub probe_gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 4,
            sampling: SamplingParams {
                temperature: 1.0,
                top_p: 0.7,
            },
            every: 0,
            probe_gamma: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to evaluate, trace, or resume from.
    pub checkpoint: Option<PathBuf>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Write a decoded trace of eval task 0 when training ends.
    pub trace: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            checkpoint_every: 0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab: VocabConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub rollout: ChunkingConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: VocabConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig {
                context_window: 64,
                ..ModelConfig::default()
            },
            rollout: ChunkingConfig::default(),
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Format(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like section.key=value"))?;
            let key = key.trim();
            let value = parse_literal(raw.trim());
            set_path(&mut root, key, value)?;
        }
        let text = toml::to_string(&root).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Replaces `io` paths from the environment.
    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> Self {
        for (var, field) in ENV_OVERRIDES {
            if let Some(v) = get(var) {
                let path = PathBuf::from(v);
                match field {
                    "out_dir" => self.io.out_dir = path,
                    "data_dir" => self.io.data_dir = path,
                    _ => self.io.checkpoint = Some(path),
                }
            }
        }
        self
    }

    /// Fills derived fields: the model vocabulary size and seed.
    pub fn resolved(mut self) -> Result<Self> {
        let vocab = Vocabulary::generate(&self.vocab)?;
        self.model.vocab_size = vocab.len();
        self.model.seed = self.seed;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let vocab = Vocabulary::generate(&self.vocab)?;
        self.synth.validate(&vocab)?;
        if self.data.train_size == 0 {
            return Err(Error::config("data.train_size", "must be at least 1"));
        }
        if self.data.eval_size == 0 {
            return Err(Error::config("data.eval_size", "must be at least 1"));
        }
        self.model.validate()?;
        if self.model.vocab_size != vocab.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("is {} but the vocabulary has {} tokens", self.model.vocab_size, vocab.len()),
            ));
        }
        self.rollout.validate(&self.model)?;
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Error::config("eval.k", "must be at least 1"));
        }
        self.eval.sampling.validate()?;
        if !(0.0..=1.0).contains(&self.eval.probe_gamma) {
            return Err(Error::config("eval.probe_gamma", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "is not a section"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::config(key, "empty key"))
}

fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string())
}
