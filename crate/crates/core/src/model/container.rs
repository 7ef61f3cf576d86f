//! Named-tensor container.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping each tensor name to `{"dtype", "shape", "data_offsets"}`, then
//! one contiguous little-endian data buffer. Offsets are relative to the start
//! of the buffer. An optional `__metadata__` entry maps strings to strings.
//! This is byte-compatible with the `.safetensors` files published for GPT-2.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers larger than this; real headers are a few tens of KiB.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// A tensor decoded to `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// All tensors of a container, keyed by name.
#[derive(Debug, Default, Clone)]
pub struct TensorStore {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorStore {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Container("file shorter than the 8-byte header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if header_len > MAX_HEADER_LEN || 8 + header_len as usize > bytes.len() {
            return Err(Error::Container(format!("header length {header_len} out of bounds")));
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|_| Error::Container("header is not valid UTF-8".into()))?;
        let mut entries: BTreeMap<String, serde_json::Value> = serde_json::from_str(header.trim_end())
            .map_err(|e| Error::Container(format!("header is not a JSON object: {e}")))?;
        let buffer = &bytes[header_end..];

        let mut store = TensorStore::default();
        if let Some(meta) = entries.remove(METADATA_KEY) {
            store.metadata = serde_json::from_value(meta)
                .map_err(|e| Error::Container(format!("bad metadata: {e}")))?;
        }
        for (name, value) in entries {
            let info: TensorInfo = serde_json::from_value(value)
                .map_err(|e| Error::Container(format!("bad entry for `{name}`: {e}")))?;
            let [start, end] = info.data_offsets;
            let numel: usize = info.shape.iter().product();
            if start > end || end > buffer.len() {
                return Err(Error::Container(format!(
                    "offsets [{start}, {end}) of `{name}` exceed buffer of {} bytes",
                    buffer.len()
                )));
            }
            if end - start != numel * info.dtype.size() {
                return Err(Error::Container(format!(
                    "`{name}` spans {} bytes but shape {:?} of {:?} needs {}",
                    end - start,
                    info.shape,
                    info.dtype,
                    numel * info.dtype.size()
                )));
            }
            let data = decode(&buffer[start..end], info.dtype);
            store.tensors.insert(name, Tensor::new(info.shape, data));
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), Tensor::new(shape, data));
    }

    /// Serializes every tensor as F32 in name order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.data.len() * 4;
            let info = TensorInfo {
                dtype: Dtype::F32,
                shape: t.shape.clone(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(info)?);
            offset += len;
        }
        let mut header = serde_json::to_string(&header)?.into_bytes();
        while header.len() % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

fn decode(raw: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}
