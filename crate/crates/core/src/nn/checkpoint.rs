//! Binary checkpoint format.
//!
//! Layout: the magic bytes `STRB`, a little-endian `u32` format version, a
//! little-endian `u32` byte length followed by a UTF-8 JSON header (the
//! architecture, the field order with shapes, and free-form metadata),
//! then every field as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::arch::MlpArchitecture;
use crate::nn::params::{init_params, ModelParams};

pub const MAGIC: &[u8; 4] = b"STRB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSpec {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: MlpArchitecture,
    epsilon: f64,
    stat_momentum: f64,
    fields: Vec<FieldSpec>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Parameters plus free-form provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_owned(), value);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fields = self.params.all_fields();
        let header = Header {
            arch: self.params.arch().clone(),
            epsilon: self.params.epsilon(),
            stat_momentum: self.params.stat_momentum(),
            fields: fields
                .iter()
                .map(|(name, f)| FieldSpec {
                    name: name.clone(),
                    len: f.len(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let body: usize = fields.iter().map(|(_, f)| f.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, f) in &fields {
            for v in f.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes.get(at..at + n).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: need bytes {at}..{} but file has {}",
                    at + n,
                    bytes.len()
                ))
            })
        };
        if take(0, 4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(12, hlen)?)?;
        let mut params = init_params::<f32>(&header.arch, 0)?;
        let expected: Vec<(String, usize)> = params
            .all_fields()
            .iter()
            .map(|(n, f)| (n.clone(), f.len()))
            .collect();
        let declared: Vec<(String, usize)> =
            header.fields.iter().map(|f| (f.name.clone(), f.len)).collect();
        if expected != declared {
            return Err(Error::Checkpoint(
                "field layout does not match the architecture".into(),
            ));
        }
        let mut at = 12 + hlen;
        for dst in params.all_fields_mut() {
            let raw = take(at, dst.len() * 4)?;
            for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            at += raw.len();
        }
        if at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last field",
                bytes.len() - at
            )));
        }
        params.validate()?;
        Ok(Self {
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.as_ref().parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of the parameter values alone (metadata excluded).
pub fn params_digest(params: &ModelParams<f32>) -> String {
    let mut h = Sha256::new();
    for (name, f) in params.all_fields() {
        h.update(name.as_bytes());
        for v in f {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
