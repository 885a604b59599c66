//! Named trainable parameters, their gradients, and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "TYCKPT01"
//! bytes 8..16   u64 header length H
//! bytes 16..16+H  UTF-8 JSON header
//! rest          f64 payload, tensors back to back
//! ```
//!
//! The header is `{"meta": <any JSON>, "tensors": [{"name", "shape", "offset",
//! "len", "frozen_rows"}]}` where `offset` is the byte offset of the tensor
//! inside the payload and `len` its element count.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TYCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which of the two jointly trained models owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Feature extractor (sentiment BiLSTM and its embedding table).
    Extractor,
    /// Typhoon classifier head.
    Classifier,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Per-row freeze mask for matrices; empty means every row trains.
    pub frozen_rows: Vec<bool>,
}

impl Param {
    pub fn is_row_frozen(&self, row: usize) -> bool {
        self.frozen_rows.get(row).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            grad,
            frozen_rows: Vec::new(),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Glorot-uniform tensor of `shape` with the given fans.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let t = glorot(shape, fan_in, fan_out, rng);
        self.add(name, group, t)
    }

    pub fn add_filled(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, group, Tensor::full(shape, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn set_frozen_rows(&mut self, id: ParamId, rows: Vec<bool>) -> Result<()> {
        let p = &mut self.params[id.0];
        let (nrows, _) = p.value.rows_cols();
        if rows.len() != nrows {
            return Err(Error::shape("frozen_rows", &[nrows], &[rows.len()]));
        }
        p.frozen_rows = rows;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Writes every parameter of `group` (or all when `None`) to `path`.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        group: Option<ParamGroup>,
        meta: serde_json::Value,
    ) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            let frozen: Vec<usize> = p
                .frozen_rows
                .iter()
                .enumerate()
                .filter(|(_, f)| **f)
                .map(|(i, _)| i)
                .collect();
            entries.push(TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                offset: payload.len() as u64,
                len: p.value.len() as u64,
                frozen_rows: frozen,
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            meta,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Overwrites values (and freeze masks) of same-named parameters.
    /// Every tensor in the checkpoint must exist here with an identical shape.
    pub fn load_values(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for t in &ckpt.tensors {
            let id = self
                .id(&t.name)
                .ok_or_else(|| Error::Data(format!("checkpoint tensor {} has no matching parameter", t.name)))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.value.shape() {
                return Err(Error::shape("load_values", p.value.shape(), t.value.shape()));
            }
            p.value = t.value.clone();
            if !t.frozen_rows.is_empty() {
                let (rows, _) = p.value.rows_cols();
                let mut mask = vec![false; rows];
                for &r in &t.frozen_rows {
                    if r < rows {
                        mask[r] = true;
                    }
                }
                p.frozen_rows = mask;
            }
        }
        Ok(())
    }
}

pub(crate) fn glorot<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    #[serde(default)]
    frozen_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CheckpointTensor {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub frozen_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Data("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            if end > payload.len() {
                return Err(Error::Data(format!("tensor {} runs past end of payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(CheckpointTensor {
                name: e.name,
                group: e.group,
                value: Tensor::new(e.shape, data)?,
                frozen_rows: e.frozen_rows,
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }
}
