//! Single-tensor container: magic `DNPT`, rank (u32), dims (u32 each), then
//! little-endian f32 data.

use std::path::Path;

use numcore::Tensor;

use crate::error::{DnpError, Result};

pub const MAGIC: &[u8; 4] = b"DNPT";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut r = crate::checkpoint::Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:?}, expected {MAGIC:?}"));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("unsupported rank {rank}"));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let data = r.f32s(shape.iter().product())?;
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    Tensor::from_vec(&shape, data).map_err(|e| e.to_string())
}

pub fn save(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| DnpError::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| DnpError::io(path, e))?;
    decode(&bytes).map_err(|e| DnpError::format(path, e))
}
