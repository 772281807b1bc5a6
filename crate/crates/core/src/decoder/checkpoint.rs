//! `BSKP1` checkpoint files.
//!
//! Layout: the 5-byte magic `BSKP1`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor as little-endian `f32` values. Each
//! header entry gives the tensor's name, shape and byte offset into the data
//! section.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::DecoderConfig;
use super::params::DecoderParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"BSKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: DecoderConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<TensorEntry>,
    #[serde(default)]
    extra: Vec<TensorEntry>,
}

/// Parameters plus optional auxiliary tensors such as optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DecoderConfig,
    pub step: u64,
    pub meta: serde_json::Value,
    pub params: DecoderParams,
    pub extra: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: DecoderConfig, step: u64, params: DecoderParams) -> Self {
        Self {
            config,
            step,
            meta: serde_json::Value::Null,
            params,
            extra: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = |it: &mut dyn Iterator<Item = (&str, &Tensor)>| {
            it.map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset: data.len() as u64,
                };
                for v in t.data() {
                    data.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                e
            })
            .collect::<Vec<_>>()
        };
        let params = entries(&mut self.params.iter());
        let extra = entries(&mut self.extra.iter().map(|(k, v)| (k.as_str(), v)));
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            params,
            extra,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing BSKP1 magic"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[5..13]);
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header length overflow"))?;
        let body = &bytes[13..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        header.config.validate()?;
        let data = &body[len..];
        let read = |entries: &[TensorEntry]| -> Result<IndexMap<String, Tensor>> {
            let mut out = IndexMap::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let start = usize::try_from(e.offset).map_err(|_| bad("offset overflow"))?;
                let end = start
                    .checked_add(n * 4)
                    .filter(|&end| end <= data.len())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of file", e.name)))?;
                let values = data[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                let t = Tensor::new(e.shape.clone(), values)
                    .map_err(|_| Error::Checkpoint(format!("tensor {} holds non-finite values", e.name)))?;
                if out.insert(e.name.clone(), t).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
                }
            }
            Ok(out)
        };
        let params = DecoderParams::from_tensors(&header.config, read(&header.params)?)?;
        let extra = read(&header.extra)?;
        Ok(Self {
            config: header.config,
            step: header.step,
            meta: header.meta,
            params,
            extra,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_f32() {
        let cfg = DecoderConfig::micro();
        let params = DecoderParams::init(&cfg, 3).unwrap();
        let mut ck = Checkpoint::new(cfg, 12, params.clone());
        ck.extra.insert("adam.m:pos_mem".into(), Tensor::full([8, 2, 2], 0.25));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.extra["adam.m:pos_mem"].data()[0], 0.25);
        for ((n1, a), (n2, b)) in params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert!(a.max_abs_diff(b) <= 1e-6 * a.max_abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cfg = DecoderConfig::micro();
        let ck = Checkpoint::new(cfg.clone(), 0, DecoderParams::init(&cfg, 0).unwrap());
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE1xxxxxxxx"), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::Checkpoint(_))
        ));
    }
}
