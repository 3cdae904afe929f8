//! Checkpoint archive: `MAGIC`, a little-endian `u64` header length, a JSON
//! header, then every section's `f64` values as little-endian bytes in header
//! order. The first section is always the parameters.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PolicyParams, TensorInfo};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TCCKPT\0\x01";
const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: ModelConfig,
    version: u64,
    tensors: Vec<TensorInfo>,
    sections: Vec<(String, usize)>,
    meta: serde_json::Value,
}

/// Parameters plus any auxiliary state (optimizer moments, RNG position).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub extra: Vec<(String, Vec<f64>)>,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut sections = vec![("params".to_string(), ckpt.params.len())];
    sections.extend(ckpt.extra.iter().map(|(n, v)| (n.clone(), v.len())));
    let header = serde_json::to_vec(&Header {
        schema_version: SCHEMA_VERSION,
        config: *ckpt.params.config(),
        version: ckpt.params.version(),
        tensors: ckpt.params.layout().tensors().cloned().collect(),
        sections,
        meta: ckpt.meta.clone(),
    })?;
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let all = std::iter::once(ckpt.params.as_slice()).chain(ckpt.extra.iter().map(|(_, v)| v.as_slice()));
        for section in all {
            for x in section {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint archive".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema {}",
            header.schema_version
        )));
    }
    let mut read_section = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    };
    let mut sections = header.sections.into_iter();
    let (first, n) = sections
        .next()
        .ok_or_else(|| Error::Format("checkpoint has no sections".into()))?;
    if first != "params" {
        return Err(Error::Format("first checkpoint section must be params".into()));
    }
    let params = PolicyParams::from_raw(header.config, read_section(n)?, header.version)?;
    let expected: Vec<TensorInfo> = params.layout().tensors().cloned().collect();
    if expected != header.tensors {
        return Err(Error::Format("tensor table does not match the model config".into()));
    }
    let extra = sections
        .map(|(name, n)| Ok((name, read_section(n)?)))
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        params,
        extra,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_bit_exact() {
        let mut p = PolicyParams::init(ModelConfig {
            vocab_size: 16,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            context_window: 8,
            tie_embeddings: false,
            seed: 4,
        })
        .unwrap();
        p.as_mut_slice()[3] = f64::MIN_POSITIVE / 3.0;
        p.bump_version();
        let ckpt = Checkpoint {
            params: p,
            extra: vec![("adam_m".into(), vec![1.5, -0.0, 1e-300])],
            meta: serde_json::json!({"step": 3, "rng": [1, 2]}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.version(), 1);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params.as_slice()), bits(ckpt.params.as_slice()));
        assert_eq!(bits(&back.extra[0].1), bits(&ckpt.extra[0].1));
        assert_eq!(back.meta, ckpt.meta);
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
