//! Checkpoint container.
//!
//! Layout: the 8-byte magic `SPCLCKPT`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every tensor as concatenated little-endian
//! `f32` values. Tensor offsets in the header are byte offsets into that blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPCLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Snapshot of the configuration that produced the tensors.
    pub config: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Checkpoint {
            config,
            tensors: Vec::new(),
        }
    }

    /// Every parameter (in registration order) followed by every buffer
    /// whose name passes `keep`.
    pub fn from_store(store: &ParamStore<f32>, config: Value, keep: impl Fn(&str) -> bool) -> Self {
        let mut ckpt = Checkpoint::new(config);
        for p in store.params().iter().filter(|p| keep(&p.name)) {
            ckpt.push(&p.name, TensorKind::Param, p.tensor.clone());
        }
        for (name, t) in store.buffers().iter().filter(|(n, _)| keep(n)) {
            ckpt.push(name, TensorKind::Buffer, t.clone());
        }
        ckpt
    }

    pub fn push(&mut self, name: &str, kind: TensorKind, tensor: Tensor<f32>) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            kind,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            match t.kind {
                TensorKind::Param => {
                    store.add(&t.name, t.tensor.clone())?;
                }
                TensorKind::Buffer => store.add_buffer(&t.name, t.tensor.clone())?,
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                kind: t.kind,
                shape: t.tensor.shape().to_vec(),
                offset,
            });
            offset += 4 * t.tensor.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint container (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.checked_add(hlen).ok_or_else(|| err("header length overflow".into()))?)
            .ok_or_else(|| err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| err(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {}", header.format_version)));
        }
        let blob = &bytes[16 + hlen..];

        let mut spans: Vec<(u64, u64, &str)> = header
            .tensors
            .iter()
            .map(|e| (e.offset, 4 * e.shape.iter().product::<usize>() as u64, e.name.as_str()))
            .collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(err(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = blob
                .get(start..start + 4 * n)
                .ok_or_else(|| err(format!("tensor `{}` runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                kind: e.kind,
                tensor: Tensor::new(e.shape, data)?,
            });
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
