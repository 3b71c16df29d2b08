//! Audio pathway: per-window 1-D convolutional encoder and attention mixer.

use numcore::{Activation, Element, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnpError, Result};

/// Per-step feature width of the audio track.
pub const FEATURE_DIM: usize = 29;
/// Steps per encoder window.
pub const WINDOW: usize = 16;
/// Half-width of the code neighbourhood mixed by attention.
pub const MIX_HALF: usize = 4;
/// Number of codes mixed per frame.
pub const MIX_LEN: usize = 2 * MIX_HALF;

/// Frame-aligned audio features, `T x 29`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    features: Tensor<f32>,
}

impl AudioTrack {
    pub fn new(features: Tensor<f32>) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[1] != FEATURE_DIM {
            return Err(DnpError::validation(
                "audio track",
                format!("expected T x {FEATURE_DIM}, got {:?}", features.shape()),
            ));
        }
        if !features.is_finite() {
            return Err(DnpError::validation("audio track", "non-finite feature"));
        }
        Ok(Self { features })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.features.data()[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    /// The `16 x 29` window for frame `i`: rows `i-8 ..= i+7`, replicating the
    /// first/last row past the ends.
    pub fn window(&self, i: usize) -> Result<AudioWindow> {
        let t = self.frames();
        if i >= t {
            return Err(DnpError::Index { index: i, len: t });
        }
        let mut data = Vec::with_capacity(WINDOW * FEATURE_DIM);
        for k in 0..WINDOW as isize {
            let r = (i as isize + k - (WINDOW / 2) as isize).clamp(0, t as isize - 1) as usize;
            data.extend_from_slice(self.row(r));
        }
        Ok(AudioWindow { data })
    }

    /// The windows whose codes are mixed for frame `i`: frames
    /// `i-3 ..= i+4`, clamped into the track.
    pub fn mix_windows(&self, i: usize) -> Result<Vec<AudioWindow>> {
        let t = self.frames();
        if i >= t {
            return Err(DnpError::Index { index: i, len: t });
        }
        (0..MIX_LEN as isize)
            .map(|k| {
                let f = (i as isize + k - (MIX_HALF as isize - 1)).clamp(0, t as isize - 1);
                self.window(f as usize)
            })
            .collect()
    }

    /// Same track with frames permuted: row `t` of the result is row
    /// `order[t]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames() || order.iter().any(|&o| o >= self.frames()) {
            return Err(DnpError::validation("audio permutation", "not a permutation of the frames"));
        }
        let data = order.iter().flat_map(|&o| self.row(o).iter().copied()).collect();
        Self::new(Tensor::from_vec(&[self.frames(), FEATURE_DIM], data)?)
    }
}

/// A `16 x 29` block of consecutive feature rows, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub data: Vec<f32>,
}

impl AudioWindow {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != WINDOW * FEATURE_DIM {
            return Err(DnpError::validation(
                "audio window",
                format!("expected {} values, got {}", WINDOW * FEATURE_DIM, data.len()),
            ));
        }
        Ok(Self { data })
    }

    /// Rows in reverse time order.
    pub fn reversed(&self) -> Self {
        let data = self
            .data
            .chunks_exact(FEATURE_DIM)
            .rev()
            .flatten()
            .copied()
            .collect();
        Self { data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioConfig {
    /// Code width.
    pub n_a: usize,
    /// Output channels of the four strided convolutions.
    pub channels: [usize; 4],
    /// Hidden width of the attention scorer.
    pub score_hidden: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            n_a: 32,
            channels: [32, 32, 64, 64],
            score_hidden: 16,
        }
    }
}

impl AudioConfig {
    pub fn tiny() -> Self {
        Self {
            n_a: 8,
            channels: [8, 8, 8, 8],
            score_hidden: 4,
        }
    }
}

fn p<T: Element>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str) -> Result<Var> {
    Ok(g.param(params, params.id(name)?))
}

/// Encoder and attention mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioNet {
    pub config: AudioConfig,
}

impl AudioNet {
    pub fn new(config: AudioConfig) -> Result<Self> {
        if config.n_a == 0 || config.score_hidden == 0 || config.channels.contains(&0) {
            return Err(DnpError::validation("audio config", "all widths must be positive"));
        }
        Ok(Self { config })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet<f32>, rng: &mut R) {
        let gain = 1.0 + 0.2f64 * 0.2;
        let mut ci = FEATURE_DIM;
        for (l, &co) in self.config.channels.iter().enumerate() {
            let bound = (6.0 / (gain * (ci * 3) as f64)).sqrt();
            params.insert(
                format!("audio.c{l}.k"),
                Tensor::uniform(&[co, ci, 3, 1], bound, rng).with_requires_grad(true),
            );
            params.insert(format!("audio.c{l}.b"), Tensor::zeros(&[co]).with_requires_grad(true));
            ci = co;
        }
        let n_a = self.config.n_a;
        let xavier = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
        params.insert(
            "audio.fc.w",
            Tensor::uniform(&[ci, n_a], xavier(ci, n_a), rng).with_requires_grad(true),
        );
        params.insert("audio.fc.b", Tensor::zeros(&[n_a]).with_requires_grad(true));
        let h = self.config.score_hidden;
        params.insert(
            "audio.att.w1",
            Tensor::uniform(&[n_a, h], xavier(n_a, h), rng).with_requires_grad(true),
        );
        params.insert("audio.att.b1", Tensor::zeros(&[h]).with_requires_grad(true));
        params.insert(
            "audio.att.w2",
            Tensor::uniform(&[h, 1], xavier(h, 1), rng).with_requires_grad(true),
        );
        params.insert("audio.att.b2", Tensor::zeros(&[1]).with_requires_grad(true));
    }

    /// Encodes `n` windows at once into an `n x n_a` code matrix.
    pub fn encode<T: Element>(&self, g: &mut Graph<T>, params: &ParamSet<T>, windows: &[AudioWindow]) -> Result<Var> {
        let n = windows.len();
        if n == 0 {
            return Err(DnpError::Contract("no audio windows to encode".into()));
        }
        // Feature channels x time x window.
        let mut data = vec![T::zero(); FEATURE_DIM * WINDOW * n];
        for (w, win) in windows.iter().enumerate() {
            if win.data.len() != WINDOW * FEATURE_DIM {
                return Err(DnpError::Contract(format!(
                    "audio window has {} values, expected {}",
                    win.data.len(),
                    WINDOW * FEATURE_DIM
                )));
            }
            for t in 0..WINDOW {
                for c in 0..FEATURE_DIM {
                    data[(c * WINDOW + t) * n + w] = T::of(win.data[t * FEATURE_DIM + c] as f64);
                }
            }
        }
        let mut x = g.constant(&[FEATURE_DIM, WINDOW, n], data)?;
        for l in 0..self.config.channels.len() {
            let k = p(g, params, &format!("audio.c{l}.k"))?;
            let b = p(g, params, &format!("audio.c{l}.b"))?;
            x = g.conv2d_ext(x, k, Some(b), (2, 1), (1, 0))?;
            x = g.activate(x, Activation::LEAKY);
        }
        let c = *self.config.channels.last().expect("four layers");
        let x = g.reshape(x, &[c, n])?;
        let x = g.transpose(x)?;
        let w = p(g, params, "audio.fc.w")?;
        let b = p(g, params, "audio.fc.b")?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    /// Attention weights (`1 x n`) over an `n x n_a` code matrix.
    pub fn attention<T: Element>(&self, g: &mut Graph<T>, params: &ParamSet<T>, codes: Var) -> Result<Var> {
        let shape = g.shape(codes).to_vec();
        if shape.len() != 2 || shape[1] != self.config.n_a {
            return Err(DnpError::Contract(format!(
                "codes must be n x {}, got {shape:?}",
                self.config.n_a
            )));
        }
        let w1 = p(g, params, "audio.att.w1")?;
        let b1 = p(g, params, "audio.att.b1")?;
        let w2 = p(g, params, "audio.att.w2")?;
        let b2 = p(g, params, "audio.att.b2")?;
        let h = g.matmul(codes, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.activate(h, Activation::LEAKY);
        let s = g.matmul(h, w2)?;
        let s = g.add_row(s, b2)?;
        let s = g.reshape(s, &[1, shape[0]])?;
        Ok(g.softmax_rows(s)?)
    }

    /// Mixed code `α = Σ w_k a_k` (`1 x n_a`) from exactly `2u` codes.
    pub fn mix<T: Element>(&self, g: &mut Graph<T>, params: &ParamSet<T>, codes: Var) -> Result<(Var, Var)> {
        let rows = g.shape(codes).first().copied().unwrap_or(0);
        if rows != MIX_LEN {
            return Err(DnpError::Contract(format!(
                "attention mixes exactly {MIX_LEN} codes, got {rows}"
            )));
        }
        let w = self.attention(g, params, codes)?;
        let alpha = g.matmul(w, codes)?;
        Ok((alpha, w))
    }

    /// Mixed code for the 8 windows around a frame.
    pub fn condition<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        windows: &[AudioWindow],
    ) -> Result<Var> {
        let codes = self.encode(g, params, windows)?;
        Ok(self.mix(g, params, codes)?.0)
    }

    /// Code for a single window.
    pub fn audio_encode(&self, params: &ParamSet<f32>, window: &AudioWindow) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let a = self.encode(&mut g, params, std::slice::from_ref(window))?;
        Ok(g.value(a).to_vec())
    }

    /// Mixed code and attention weights for an explicit code matrix.
    pub fn attention_mix(&self, params: &ParamSet<f32>, codes: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut g = Graph::new();
        let c = g.input(codes, false);
        let (alpha, w) = self.mix(&mut g, params, c)?;
        Ok((g.value(alpha).to_vec(), g.value(w).to_vec()))
    }

    /// Mixed code for frame `i` of a track.
    pub fn frame_code(&self, params: &ParamSet<f32>, track: &AudioTrack, i: usize) -> Result<Vec<f32>> {
        let windows = track.mix_windows(i)?;
        let mut g = Graph::new();
        let alpha = self.condition(&mut g, params, &windows)?;
        Ok(g.value(alpha).to_vec())
    }
}
