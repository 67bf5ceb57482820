//! Binary checkpoint container shared by neural and SVM models.
//!
//! Layout (all integers little-endian):
//!
//! | offset      | size | field                                         |
//! |-------------|------|-----------------------------------------------|
//! | 0           | 4    | magic `RIPC`                                  |
//! | 4           | 2    | version, currently 1                          |
//! | 6           | 2    | kind: 0 neural, 1 svm                          |
//! | 8           | 4    | header length `H` in bytes                    |
//! | 12          | H    | UTF-8 TOML header                             |
//! | 12 + H      | 8·N  | payload: `N` f64 values                       |
//!
//! The header carries the method id, the fully resolved run configuration
//! and a `[[tensor]]` table (`name`, `shape`, `offset`) whose offsets count
//! f64 values from the start of the payload. Tensors are stored row-major in
//! table order, back to back, so the payload length is the sum of the shape
//! products.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RIPC";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("unknown checkpoint kind {0}")]
    Kind(u16),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Neural = 0,
    Svm = 1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    method: String,
    /// Resolved run configuration, verbatim TOML.
    config: String,
    /// Free-form scalar metadata (bias terms, kernel width, ...).
    #[serde(default)]
    meta: toml::Table,
    #[serde(default)]
    tensor: Vec<TensorEntry>,
}

const FORMAT: &str = "ripbench-checkpoint";

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub method: String,
    pub config: String,
    pub meta: toml::Table,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: Kind, method: impl Into<String>, config: impl Into<String>) -> Self {
        Self {
            kind,
            method: method.into(),
            config: config.into(),
            meta: toml::Table::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| CheckpointError::Tensor {
            name: name.into(),
            msg: "missing".into(),
        })
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        match self.meta.get(key) {
            Some(toml::Value::Float(v)) => Ok(*v),
            Some(toml::Value::Integer(v)) => Ok(*v as f64),
            _ => Err(CheckpointError::Header(format!("missing numeric meta key {key}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            format: FORMAT.into(),
            method: self.method.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensor: entries,
        };
        let text = toml::to_string(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + text.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u16).to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated(format!("{} bytes, preamble needs {PREAMBLE}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = match u16::from_le_bytes([bytes[6], bytes[7]]) {
            0 => Kind::Neural,
            1 => Kind::Svm,
            k => return Err(CheckpointError::Kind(k)),
        };
        let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let body = &bytes[PREAMBLE..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated(format!("header needs {hlen} bytes, {} left", body.len())));
        }
        let text = std::str::from_utf8(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header: Header = toml::from_str(text).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format != FORMAT {
            return Err(CheckpointError::Header(format!("format tag {:?}", header.format)));
        }
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(CheckpointError::Truncated("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensor.len());
        let mut expect = 0;
        for e in header.tensor {
            let bad = |msg: String| CheckpointError::Tensor {
                name: e.name.clone(),
                msg,
            };
            let n = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows".into()))?;
            if e.offset != expect {
                return Err(bad(format!("offset {} where {expect} was expected", e.offset)));
            }
            let end = e.offset.checked_add(n).filter(|&end| end <= values.len()).ok_or_else(|| {
                CheckpointError::Truncated(format!("tensor {} runs past the payload", e.name))
            })?;
            let t = Tensor::new(&e.shape, values[e.offset..end].to_vec()).map_err(|err| bad(err.to_string()))?;
            tensors.push((e.name, t));
            expect = end;
        }
        if expect != values.len() {
            return Err(CheckpointError::Truncated(format!("{} trailing payload values", values.len() - expect)));
        }
        Ok(Self {
            kind,
            method: header.method,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
