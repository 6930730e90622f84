//! Binary parameter container.
//!
//! Layout: 8-byte magic `MAGNETCK`, `u32` LE format version, `u64` LE header
//! length, a UTF-8 JSON header, then the tensors' values as consecutive
//! little-endian `f64`. The header lists every tensor's name, shape,
//! trainability and element offset, plus free-form metadata.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimState};
use super::params::{ParamEntry, ParamStore};
use super::tensor::Tensor;
use crate::error::{MagnetError, Result};

const MAGIC: &[u8; 8] = b"MAGNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    /// Arbitrary extra documents (model config, run config, ...), stored as
    /// JSON strings so the container stays schema-agnostic.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorHeader>,
    #[serde(default)]
    optimizer: Option<OptimHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        for e in self.params.entries() {
            tensors.push(TensorHeader {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                offset: payload.len(),
            });
            payload.extend_from_slice(e.value.data());
        }
        let optimizer = self.optim.as_ref().map(|o| {
            for (kind, map) in [("m", &o.first), ("v", &o.second)] {
                for (name, t) in map {
                    tensors.push(TensorHeader {
                        name: format!("@adam.{kind}.{name}"),
                        shape: t.shape().to_vec(),
                        trainable: false,
                        offset: payload.len(),
                    });
                    payload.extend_from_slice(t.data());
                }
            }
            OptimHeader {
                config: o.config.clone(),
                step: o.step,
            }
        });
        let header = Header {
            dtype: "f64".into(),
            meta: self.meta.clone(),
            tensors,
            optimizer,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + hjson.len() + payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let perr = |msg: &str| MagnetError::Parse {
            expected: CHECKPOINT_VERSION,
            msg: msg.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(perr("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(perr(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| perr("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])
            .map_err(|e| perr(&format!("header: {e}")))?;
        if header.dtype != "f64" {
            return Err(perr(&format!("unsupported dtype {}", header.dtype)));
        }
        let body = &bytes[hend..];
        if body.len() % 8 != 0 {
            return Err(perr("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut entries = Vec::new();
        let mut optim = header.optimizer.map(|o| {
            let mut st = OptimState::new(o.config);
            st.step = o.step;
            st
        });
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let data = values
                .get(th.offset..th.offset + n)
                .ok_or_else(|| perr(&format!("tensor {} exceeds payload", th.name)))?
                .to_vec();
            let value = Tensor::new(th.shape, data)?;
            if let Some(rest) = th.name.strip_prefix("@adam.") {
                let st = optim
                    .as_mut()
                    .ok_or_else(|| perr("optimizer tensor without optimizer header"))?;
                if let Some(name) = rest.strip_prefix("m.") {
                    st.first.insert(name.to_string(), value);
                } else if let Some(name) = rest.strip_prefix("v.") {
                    st.second.insert(name.to_string(), value);
                } else {
                    return Err(perr(&format!("unknown optimizer tensor {}", th.name)));
                }
            } else {
                entries.push(ParamEntry {
                    name: th.name,
                    value,
                    trainable: th.trainable,
                });
            }
        }
        Ok(Self {
            meta: header.meta,
            params: ParamStore::from_entries(entries)?,
            optim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
