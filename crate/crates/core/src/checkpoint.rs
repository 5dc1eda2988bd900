//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                    |
//! |------------------|--------------------------------------------|
//! | `0..8`           | magic `TNDMCKPT`                           |
//! | `8..12`          | `u32` format version (currently 1)         |
//! | `12..20`         | `u64` header length `H` in bytes           |
//! | `20..20+H`       | UTF-8 JSON header                          |
//! | `20+H..`         | tensor payloads, `f64` little-endian       |
//!
//! The header is `{"metadata": {...}, "tensors": [{"name", "shape",
//! "dtype", "offset", "nbytes"}, ...]}` with `offset` counted from the
//! start of the payload. Tensors are stored in name order and the payload
//! must be covered exactly, with no gaps or trailing bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TNDMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: u64 = 20;

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Hex digest of the configuration that produced the weights.
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.to_string(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Errors unless `other` has the same names with the same shapes.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoints hold {} and {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => {
                    return Err(Error::Contract(format!(
                        "tensor {name} missing from one checkpoint"
                    )))
                }
                Some(o) if o.shape != t.shape => {
                    return Err(Error::Contract(format!(
                        "tensor {name} has shapes {:?} and {:?}",
                        t.shape, o.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = 8 * t.data.len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f64".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN as usize + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: u64, message: String| Error::Format { offset, message };
        let total = bytes.len() as u64;
        if total < PREFIX_LEN {
            return Err(fmt(
                total,
                format!("file is {total} bytes, shorter than the {PREFIX_LEN}-byte prefix"),
            ));
        }
        if &bytes[0..8] != MAGIC {
            return Err(fmt(0, "bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fmt(8, format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload_start = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&end| end <= total)
            .ok_or_else(|| {
                fmt(
                    12,
                    format!("header length {header_len} runs past end of file ({total} bytes)"),
                )
            })?;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN as usize..payload_start as usize])
                .map_err(|e| fmt(PREFIX_LEN, format!("corrupt header: {e}")))?;
        let payload = &bytes[payload_start as usize..];
        let mut expected_offset = 0u64;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let at = payload_start + e.offset;
            if e.dtype != "f64" {
                return Err(fmt(
                    PREFIX_LEN,
                    format!("tensor {} has unsupported dtype {}", e.name, e.dtype),
                ));
            }
            if e.offset != expected_offset {
                return Err(fmt(
                    at,
                    format!(
                        "tensor {} starts at payload offset {}, expected {expected_offset}",
                        e.name, e.offset
                    ),
                ));
            }
            let count: u64 = e.shape.iter().map(|&s| s as u64).product();
            if e.nbytes != 8 * count {
                return Err(fmt(
                    at,
                    format!(
                        "tensor {} declares {} bytes for shape {:?}",
                        e.name, e.nbytes, e.shape
                    ),
                ));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() as u64 {
                return Err(fmt(
                    total,
                    format!(
                        "truncated payload: tensor {} needs bytes up to {}",
                        e.name,
                        payload_start + end
                    ),
                ));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors
                .insert(
                    e.name.clone(),
                    Tensor {
                        shape: e.shape,
                        data,
                    },
                )
                .is_some()
            {
                return Err(fmt(at, format!("duplicate tensor {}", e.name)));
            }
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(fmt(
                payload_start + expected_offset,
                format!(
                    "{} trailing payload bytes",
                    payload.len() as u64 - expected_offset
                ),
            ));
        }
        Ok(Self {
            meta: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
