//! Fourier-feature lifting of low-dimensional inputs and assembly of the
//! conditioning vector consumed by the field MLP.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DnpError, Result};

/// Frequency counts for coordinates, pose and gaze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub n_x: usize,
    pub n_p: usize,
    pub n_g: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { n_x: 10, n_p: 4, n_g: 4 }
    }
}

/// Length of the lifted form of one scalar.
pub const fn encoded_len(n: usize) -> usize {
    2 * n + 1
}

/// Angular frequencies `2^k * pi` for `k = 0..n`.
pub fn frequencies(n: usize) -> Vec<f64> {
    (0..n).map(|k| PI * (1u64 << k) as f64).collect()
}

/// `[x, sin(pi x), cos(pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x)]`.
pub fn positional_encode(x: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(n));
    encode_into(x, n, &mut out);
    out
}

fn encode_into(x: f64, n: usize, out: &mut Vec<f64>) {
    out.push(x);
    for k in 0..n {
        let (s, c) = (PI * (1u64 << k) as f64 * x).sin_cos();
        out.push(s);
        out.push(c);
    }
}

/// Appends the lifted form of every element of `xs`, block by block.
pub fn encode_slice(xs: &[f64], n: usize, out: &mut Vec<f64>) {
    for &x in xs {
        encode_into(x, n, out);
    }
}

/// Which optional conditioning blocks the field consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningLayout {
    pub encoding: EncodingConfig,
    /// Width of the raw expression (or audio code) block.
    pub n_e: usize,
    pub use_gaze: bool,
    /// Width of the per-frame latent block; 0 disables it.
    pub n_v: usize,
}

impl ConditioningLayout {
    /// Width of `[γ(x), γ(y)]`.
    pub fn spatial_len(&self) -> usize {
        2 * encoded_len(self.encoding.n_x)
    }

    /// Width of `[γ(p), γ(g)?]`: the lifted, non-learned part of the
    /// per-frame block.
    pub fn lifted_len(&self) -> usize {
        6 * encoded_len(self.encoding.n_p) + if self.use_gaze { 2 * encoded_len(self.encoding.n_g) } else { 0 }
    }

    /// Width of `[γ(p), γ(g)?, e, v?]`.
    pub fn nonspatial_len(&self) -> usize {
        self.lifted_len() + self.n_e + self.n_v
    }

    pub fn total_len(&self) -> usize {
        self.spatial_len() + self.nonspatial_len()
    }
}

/// `[γ(x), γ(y)]` for one coordinate.
pub fn encode_coord(coord: [f64; 2], cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * encoded_len(cfg.n_x));
    encode_slice(&coord, cfg.n_x, &mut out);
    out
}

/// `[γ(p1..p6), γ(g1), γ(g2)]`, with the gaze part only when requested.
pub fn encode_lifted(pose: &[f64; 6], gaze: Option<&[f64; 2]>, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::new();
    encode_slice(pose, cfg.n_p, &mut out);
    if let Some(g) = gaze {
        encode_slice(g, cfg.n_g, &mut out);
    }
    out
}

/// Full conditioning vector `[γ(x), γ(y), γ(p), γ(g), e, v]`. Expression (or
/// audio code) and latent enter raw.
pub fn encode_conditioning(
    coord: [f64; 2],
    pose: &[f64; 6],
    gaze: &[f64; 2],
    expr_or_audio: &[f64],
    latent: &[f64],
    cfg: &EncodingConfig,
    n_e: usize,
    n_v: usize,
) -> Result<Vec<f64>> {
    if expr_or_audio.len() != n_e {
        return Err(DnpError::Contract(format!(
            "expression/audio block has {} entries, model expects {n_e}",
            expr_or_audio.len()
        )));
    }
    if latent.len() != n_v {
        return Err(DnpError::Contract(format!(
            "latent has {} entries, model expects {n_v}",
            latent.len()
        )));
    }
    let mut out = encode_coord(coord, cfg);
    out.extend(encode_lifted(pose, Some(gaze), cfg));
    out.extend_from_slice(expr_or_audio);
    out.extend_from_slice(latent);
    Ok(out)
}
