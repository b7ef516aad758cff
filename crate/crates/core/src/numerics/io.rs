//! Tensor checkpoint files.
//!
//! Layout: one line of compact JSON (the manifest), a `\n`, then the
//! concatenated little-endian `f64` payloads of every tensor in manifest
//! order.
//!
//! ```text
//! {"format":"attn-surgery-tensors","version":1,"meta":{...},
//!  "tensors":[{"name":"w","shape":[2,3],"dtype":"f64"}, ...]}\n
//! <payload bytes>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "attn-surgery-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".to_string(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&manifest)?;
        bytes.push(b'\n');
        for (_, t) in &self.tensors {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut payload = &bytes[newline + 1..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for record in manifest.tensors {
            if record.dtype != "f64" {
                return Err(bad(format!("tensor {} has dtype {}", record.name, record.dtype)));
            }
            let count: usize = record.shape.iter().product();
            let nbytes = count * 8;
            if payload.len() < nbytes {
                return Err(bad(format!("payload truncated in tensor {}", record.name)));
            }
            let data = payload[..nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            payload = &payload[nbytes..];
            let tensor = Tensor::new(record.shape, data)
                .map_err(|e| bad(format!("tensor {}: {e}", record.name)))?;
            tensors.push((record.name, tensor));
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}
