//! Named parameter storage and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! | bytes          | content                                           |
//! |----------------|---------------------------------------------------|
//! | 8              | magic `ADSCKPT\0`                                 |
//! | 4              | format version (u32)                              |
//! | 8              | header length `n` (u64)                           |
//! | n              | UTF-8 JSON header `{"tensors":[{name,shape,offset}]}` |
//! | 8 × Σ numel    | f64 payload, tensors back to back                 |
//!
//! `offset` counts f64 elements from the start of the payload.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform initialized matrix or conv kernel.
    pub fn insert_xavier<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        let receptive: usize = shape.iter().skip(2).product();
        let (fan_out, fan_in) = match shape.len() {
            0 | 1 => (1, shape.first().copied().unwrap_or(1)),
            _ => (shape[0] * receptive, shape[1] * receptive),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), t.shape(), "shape change for {}", self.names[id.0]);
        self.tensors[id.0] = t;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape; `trainable` decides which become
    /// differentiable leaves. The result is indexed by `ParamId.0`.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable(ParamId(i)) { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Gradients for bound parameters after `backward`; `None` for constants.
    pub fn collect_grads(tape: &Tape, vars: &[Var]) -> Vec<Option<Tensor>> {
        vars.iter().map(|&v| tape.requires_grad(v).then(|| tape.grad(v))).collect()
    }

    /// Copies every tensor whose name also exists in `other`.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.id(name) {
                let t = other.get(src);
                if t.shape() == self.tensors[i].shape() {
                    self.tensors[i] = t.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let e = HeaderEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { tensors }).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| KernelError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(KernelError::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated"))?;
        if body.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| KernelError::Format(format!("header: {e}")))?;
        let payload = &body[hlen..];
        let total: usize = header.tensors.iter().map(|e| numel(&e.shape)).sum();
        if payload.len() != total * 8 {
            return Err(KernelError::Format(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                total * 8
            )));
        }
        let mut store = ParamStore::new();
        for e in header.tensors {
            let n = numel(&e.shape);
            let raw = payload
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| fail("tensor offset out of range"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if store.id(&e.name).is_some() {
                return Err(KernelError::Format(format!("duplicate tensor {}", e.name)));
            }
            store.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
