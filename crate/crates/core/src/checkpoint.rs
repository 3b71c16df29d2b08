//! Binary checkpoint container.
//!
//! Layout: magic `DNPC`, format version (u32 LE), a u32-length-prefixed UTF-8
//! JSON header, then for every tensor: name length (u32), name bytes, rank
//! (u32), dims (u32 each) and little-endian f32 data.

use std::path::Path;

use numcore::{AdamState, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DnpError, Result};
use crate::model::{Model, ModelConfig};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DNPC";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Parameters plus everything needed to render or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    /// An untrained checkpoint.
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model: Model::init(config, seed)?,
            step: 0,
            train: None,
            optimizer: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    train: Option<TrainConfig>,
    tensor_count: usize,
    frozen: Vec<String>,
    optimizer: Option<OptimizerHeader>,
}

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("tensor size overflows")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.model.params;
    let frozen = params
        .iter()
        .filter(|(_, _, t)| !t.requires_grad())
        .map(|(_, n, _)| n.to_string())
        .collect();
    let header = Header {
        model: ckpt.model.config.clone(),
        step: ckpt.step,
        train: ckpt.train.clone(),
        tensor_count: params.len() * if ckpt.optimizer.is_some() { 3 } else { 1 },
        frozen,
        optimizer: ckpt.optimizer.as_ref().map(|a| OptimizerHeader {
            step: a.step,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, name, t) in params.iter() {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    if let Some(a) = &ckpt.optimizer {
        for (i, (_, name, t)) in params.iter().enumerate() {
            put_tensor(&mut out, &format!("{ADAM_M}{name}"), t.shape(), &a.m[i]);
            put_tensor(&mut out, &format!("{ADAM_V}{name}"), t.shape(), &a.v[i]);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(format!("not a checkpoint: magic {magic:?}, expected {MAGIC:?}"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}; this build reads version {VERSION}"));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| format!("bad header: {e}"))?;
    header.model.validate().map_err(|e| format!("bad model config: {e}"))?;
    let reference = Model::init(header.model.clone(), 0).map_err(|e| e.to_string())?;
    let mut tensors = Vec::with_capacity(header.tensor_count);
    for _ in 0..header.tensor_count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(format!("tensor `{name}` has implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
        let data = r.f32s(count)?;
        tensors.push((name, shape, data));
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes after the last tensor", r.remaining()));
    }
    let find = |name: &str| tensors.iter().find(|t| t.0 == name);
    let mut params = ParamSet::new();
    for (_, name, t) in reference.params.iter() {
        let (_, shape, data) = find(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
        if shape.as_slice() != t.shape() {
            return Err(format!("tensor `{name}` has shape {shape:?}, config implies {:?}", t.shape()));
        }
        let tensor = Tensor::from_vec(shape, data.clone()).map_err(|e| e.to_string())?;
        params.insert(name, tensor.with_requires_grad(!header.frozen.iter().any(|f| f == name)));
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(o) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, name, t) in params.iter() {
                for (prefix, dst) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                    let key = format!("{prefix}{name}");
                    let (_, shape, data) = find(&key).ok_or_else(|| format!("missing tensor `{key}`"))?;
                    if shape.as_slice() != t.shape() {
                        return Err(format!("tensor `{key}` does not match its parameter"));
                    }
                    dst.push(data.clone());
                }
            }
            Some(AdamState {
                step: o.step,
                m,
                v,
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            })
        }
    };
    Ok(Checkpoint {
        model: Model {
            config: header.model,
            params,
        },
        step: header.step,
        train: header.train,
        optimizer,
    })
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(ckpt)).map_err(|e| DnpError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| DnpError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| DnpError::io(path, e))?;
    decode(&bytes).map_err(|e| DnpError::format(path, e))
}
