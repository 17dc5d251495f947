//! Binary weight files.
//!
//! Little-endian, no padding, no checksum:
//!
//! ```text
//! "KPNW"  u32 version (=1)  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, rank × u32 dims,
//!             product(dims) × f32
//! ```
//!
//! Each convolution contributes `<name>.weight` (rank 4, `out × in × kh × kw`)
//! and, when it has one, `<name>.bias` (rank 1).

use std::collections::HashMap;

use thiserror::Error;

use super::LayerGraph;
use crate::tensor::ConvParams;

pub const MAGIC: &[u8; 4] = b"KPNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("bad magic {0:?}; not a weight file")]
    BadMagic([u8; 4]),

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file truncated at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },

    #[error("tensor name at byte {0} is not valid UTF-8")]
    InvalidName(usize),

    #[error("tensor {0:?} appears more than once")]
    DuplicateTensor(String),

    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {0:?} missing from weight file")]
    MissingTensor(String),

    #[error("weight file has tensor {0:?} the model does not use")]
    UnknownTensor(String),

    #[error("tensor {0:?} contains a non-finite value")]
    NonFinite(String),

    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|t| 2 + t.name.len() + 1 + 4 * t.dims.len() + 4 * t.data.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(WeightError::Truncated {
                offset: self.bytes.len(),
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>, WeightError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            if m[..bytes.len()] != MAGIC[..bytes.len()] {
                return Err(WeightError::BadMagic(m));
            }
            return Err(WeightError::Truncated {
                offset: bytes.len(),
                needed: 4 - bytes.len(),
            });
        }
    };
    if &magic != MAGIC {
        return Err(WeightError::BadMagic(magic));
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    // every tensor needs at least 3 header bytes; do not trust `count` for capacity
    let mut out = Vec::with_capacity(count.min(bytes.len() / 3));
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightError::InvalidName(name_at))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(WeightError::Truncated {
                offset: bytes.len(),
                needed: usize::MAX,
            })?;
        let raw = r.take(elems)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(WeightError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

fn graph_tensors(graph: &LayerGraph) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (name, p) in graph.convs() {
        out.push(NamedTensor {
            name: format!("{name}.weight"),
            dims: p.weight_dims().to_vec(),
            data: p.weight().to_vec(),
        });
        if let Some(b) = p.bias() {
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                dims: vec![b.len()],
                data: b.to_vec(),
            });
        }
    }
    out
}

pub fn save_weights(graph: &LayerGraph) -> Vec<u8> {
    encode_tensors(&graph_tensors(graph))
}

/// Returns a copy of `graph` carrying the weights in `bytes`. Every tensor
/// the graph needs must be present with its exact shape, and nothing else.
pub fn load_weights(graph: &LayerGraph, bytes: &[u8]) -> Result<LayerGraph, WeightError> {
    let mut by_name: HashMap<String, NamedTensor> = HashMap::new();
    for t in decode_tensors(bytes)? {
        if by_name.contains_key(&t.name) {
            return Err(WeightError::DuplicateTensor(t.name));
        }
        by_name.insert(t.name.clone(), t);
    }
    let mut out = graph.clone();
    for (name, params, _) in out.convs_mut() {
        let w = take_tensor(&mut by_name, &format!("{name}.weight"), &params.weight_dims())?;
        params.weight_mut().copy_from_slice(&w);
        if let Some(bias) = params.bias_mut() {
            let b = take_tensor(&mut by_name, &format!("{name}.bias"), &[bias.len()])?;
            bias.copy_from_slice(&b);
        }
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(WeightError::UnknownTensor(extra.clone()));
    }
    Ok(out)
}

fn take_tensor(
    by_name: &mut HashMap<String, NamedTensor>,
    name: &str,
    expected: &[usize],
) -> Result<Vec<f32>, WeightError> {
    let t = by_name
        .remove(name)
        .ok_or_else(|| WeightError::MissingTensor(name.to_string()))?;
    if t.dims != expected {
        return Err(WeightError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: t.dims,
        });
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(WeightError::NonFinite(name.to_string()));
    }
    Ok(t.data)
}

/// Convenience for tests and tools: parameters of one named conv.
pub fn conv_by_name<'a>(graph: &'a LayerGraph, name: &str) -> Option<&'a ConvParams> {
    graph.convs().find(|(n, _)| *n == name).map(|(_, p)| p)
}
