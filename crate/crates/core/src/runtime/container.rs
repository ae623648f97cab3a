// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `PLNL` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PLNL" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON) | pad to 64
//! | data section: row-major f32 payloads, each starting on a 64-byte boundary
//! ```
//!
//! Tensor offsets in the manifest are relative to the start of the data
//! section, which itself starts on a 64-byte boundary of the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PlanError, Result};
use crate::runtime::spec::ModelSpec;

pub const MAGIC: &[u8; 4] = b"PLNL";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

/// Dense row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PlanError::Container(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 over the whole data section.
    pub payload_sha256: String,
}

/// Decoded container: manifest plus tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub spec: Option<ModelSpec>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            pad_to(&mut data, ALIGN);
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset: data.len() as u64,
            });
            for v in &t.data {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
            payload_sha256: hex_digest(&data),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + ALIGN + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        pad_to(&mut out, ALIGN);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(PlanError::Container("missing PLNL magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(PlanError::Container(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mend = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| PlanError::Container("manifest length past end of file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..mend]).map_err(|e| PlanError::Container(format!("manifest: {e}")))?;
        let data_start = mend.div_ceil(ALIGN) * ALIGN;
        let data = bytes.get(data_start..).unwrap_or(&[]);
        if hex_digest(data) != manifest.payload_sha256 {
            return Err(PlanError::Container("payload checksum mismatch".into()));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(PlanError::Container(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    e.name, e.dtype
                )));
            }
            let off = e.offset as usize;
            if !off.is_multiple_of(ALIGN) {
                return Err(PlanError::Container(format!(
                    "tensor `{}` offset {off} is not {ALIGN}-byte aligned",
                    e.name
                )));
            }
            let numel: usize = e.shape.iter().product();
            let end = off + numel * 4;
            let raw = data
                .get(off..end)
                .ok_or_else(|| PlanError::Container(format!("tensor `{}` payload out of bounds", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
        }
        Ok(Self {
            spec: manifest.spec,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let target = buf.len().div_ceil(align) * align;
    buf.resize(target, 0);
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut metadata = serde_json::Map::new();
        metadata.insert("layer".into(), 3.into());
        Container {
            spec: None,
            metadata,
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(),
                ),
                ("b".into(), Tensor::vector(vec![-0.5; 17])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = sample().to_bytes().unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        let data_start = (16 + mlen).div_ceil(ALIGN) * ALIGN;
        assert_eq!(data_start % ALIGN, 0);
        for e in manifest.tensors {
            assert_eq!((data_start + e.offset as usize) % ALIGN, 0);
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn bad_magic() {
        assert!(Container::from_bytes(b"GGUF\x01\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }
}
