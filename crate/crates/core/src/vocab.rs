//! Closed token alphabet and prompt-layout markers.
//!
//! The vocabulary is generated rather than learned: a block of special
//! markers followed by key words, value words, one relation word and filler
//! words. Every model input is assembled from these ids, so exact-match
//! scoring on decoded answers is exact.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SCHEMA_VERSION: u32 = 1;

/// Dense token id in `0..V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Ids of the reserved markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: TokenId,
    pub eos: TokenId,
    pub query_mark: TokenId,
    pub chunk_mark: TokenId,
    pub mem_mark: TokenId,
    pub gen_mark: TokenId,
    pub empty_mem: TokenId,
}

impl Specials {
    pub fn all(&self) -> [TokenId; 7] {
        [
            self.pad,
            self.eos,
            self.query_mark,
            self.chunk_mark,
            self.mem_mark,
            self.gen_mark,
            self.empty_mem,
        ]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.all().contains(&id)
    }
}

const SPECIAL_NAMES: [&str; 7] = [
    "<pad>", "<eos>", "<query>", "<chunk>", "<mem>", "<gen>", "<empty>",
];

/// Sizes of the content word classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub num_keys: usize,
    pub num_values: usize,
    pub num_fillers: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        // 24 + 16 + 1 relation word + 87 = 128 content tokens.
        Self {
            num_keys: 24,
            num_values: 16,
            num_fillers: 87,
        }
    }
}

impl VocabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_keys < 2 {
            return Err(Error::config("vocab.num_keys", "need at least 2 keys"));
        }
        if self.num_values < 1 {
            return Err(Error::config("vocab.num_values", "need at least 1 value"));
        }
        if self.num_fillers < 1 {
            return Err(Error::config("vocab.num_fillers", "need at least 1 filler"));
        }
        if SPECIAL_NAMES.len() + self.num_keys + self.num_values + 1 + self.num_fillers < 16 {
            return Err(Error::config("vocab", "vocabulary must have at least 16 tokens"));
        }
        Ok(())
    }
}

/// Word class of a content token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Special,
    Key,
    Value,
    Relation,
    Filler,
}

/// Immutable token table.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    specials: Specials,
    index: HashMap<String, TokenId>,
    keys: Vec<TokenId>,
    values: Vec<TokenId>,
    relation: TokenId,
    fillers: Vec<TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    schema_version: u32,
    tokens: Vec<String>,
    specials: Specials,
}

impl Vocabulary {
    pub fn generate(cfg: &VocabConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..cfg.num_keys).map(|i| format!("key{i:02}")));
        tokens.extend((0..cfg.num_values).map(|i| format!("val{i}")));
        tokens.push("rel".to_string());
        tokens.extend((0..cfg.num_fillers).map(|i| format!("w{i:03}")));
        let specials = Specials {
            pad: TokenId(0),
            eos: TokenId(1),
            query_mark: TokenId(2),
            chunk_mark: TokenId(3),
            mem_mark: TokenId(4),
            gen_mark: TokenId(5),
            empty_mem: TokenId(6),
        };
        Self::from_parts(tokens, specials)
    }

    fn from_parts(tokens: Vec<String>, specials: Specials) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        let ids = specials.all();
        for (a, id) in ids.iter().enumerate() {
            if id.index() >= tokens.len() {
                return Err(Error::Format(format!("special id {id} out of range")));
            }
            if ids[..a].contains(id) {
                return Err(Error::Format(format!("special id {id} assigned twice")));
            }
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut fillers = Vec::new();
        let mut relation = None;
        for (i, t) in tokens.iter().enumerate() {
            let id = TokenId(i as u32);
            if specials.contains(id) {
                continue;
            }
            if t.starts_with("key") {
                keys.push(id);
            } else if t.starts_with("val") {
                values.push(id);
            } else if t == "rel" {
                relation = Some(id);
            } else {
                fillers.push(id);
            }
        }
        let relation = relation.ok_or_else(|| Error::Format("missing relation word".into()))?;
        if tokens.len() < 16 {
            return Err(Error::Format("vocabulary smaller than 16 tokens".into()));
        }
        Ok(Self {
            tokens,
            specials,
            index,
            keys,
            values,
            relation,
            fillers,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn keys(&self) -> &[TokenId] {
        &self.keys
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    pub fn relation(&self) -> TokenId {
        self.relation
    }

    pub fn fillers(&self) -> &[TokenId] {
        &self.fillers
    }

    pub fn class_of(&self, id: TokenId) -> WordClass {
        if self.specials.contains(id) {
            WordClass::Special
        } else if id == self.relation {
            WordClass::Relation
        } else if self.keys.binary_search(&id).is_ok() {
            WordClass::Key
        } else if self.values.binary_search(&id).is_ok() {
            WordClass::Value
        } else {
            WordClass::Filler
        }
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .ok_or(Error::InvalidId {
                id: id.0,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.word(id).map(str::to_string)).collect()
    }

    /// Space-joined rendering, used for traces.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            schema_version: VOCAB_SCHEMA_VERSION,
            tokens: self.tokens.clone(),
            specials: self.specials,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.schema_version != VOCAB_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported vocabulary schema version {}",
                file.schema_version
            )));
        }
        Self::from_parts(file.tokens, file.specials)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn vocab() -> Vocabulary {
        Vocabulary::generate(&VocabConfig::default()).unwrap()
    }

    #[test]
    fn encode_is_identity_lookup() {
        let v = vocab();
        let ids = v.encode(&["key07", "val3"]).unwrap();
        assert_eq!(ids, vec![v.id("key07").unwrap(), v.id("val3").unwrap()]);
        assert!(v.encode::<&str>(&[]).unwrap().is_empty());
    }

    #[test]
    fn unknown_word_is_named() {
        let err = vocab().encode(&["zzz_not_in_vocab"]).unwrap_err();
        assert!(matches!(err, Error::UnknownToken(w) if w == "zzz_not_in_vocab"));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = vocab();
        let err = v.decode(&[TokenId(v.len() as u32)]).unwrap_err();
        assert!(matches!(err, Error::InvalidId { .. }));
    }

    #[test]
    fn eos_renders_as_marker() {
        let v = vocab();
        assert_eq!(v.decode(&[v.specials().eos]).unwrap(), vec!["<eos>"]);
    }

    #[test]
    fn random_round_trip() {
        let v = vocab();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<TokenId> = (0..50)
            .map(|_| TokenId(rng.gen_range(0..v.len() as u32)))
            .collect();
        let words = v.decode(&ids).unwrap();
        assert_eq!(v.encode(&words).unwrap(), ids);
    }

    #[test]
    fn default_layout() {
        let v = vocab();
        assert_eq!(v.len(), 135);
        assert_eq!(v.keys().len(), 24);
        assert_eq!(v.values().len(), 16);
        assert_eq!(v.class_of(v.id("rel").unwrap()), WordClass::Relation);
        assert_eq!(v.class_of(v.id("val0").unwrap()), WordClass::Value);
        assert_eq!(v.class_of(v.id("w000").unwrap()), WordClass::Filler);
        assert_eq!(v.class_of(v.specials().gen_mark), WordClass::Special);
    }

    #[test]
    fn json_round_trip() {
        let v = vocab();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
