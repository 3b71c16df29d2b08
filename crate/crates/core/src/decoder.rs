//! Convolutional upsampling decoder: feature map at `H/2^S` to an RGB image.

use numcore::{Activation, Element, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number of 2x upsampling stages.
    pub stages: usize,
    pub n_f: usize,
    /// Lower bound of the halving channel schedule.
    pub min_channels: usize,
}

impl DecoderConfig {
    pub fn new(stages: usize, n_f: usize) -> Self {
        Self {
            stages,
            n_f,
            min_channels: 16,
        }
    }

    /// Channel count entering each stage, plus the count leaving the last.
    pub fn channels(&self) -> Vec<usize> {
        let mut c = vec![self.n_f];
        for _ in 0..self.stages {
            let prev = *c.last().expect("non-empty");
            c.push((prev / 2).max(self.min_channels.min(prev)));
        }
        c
    }

    pub fn scale(&self) -> usize {
        1 << self.stages
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        if config.n_f == 0 {
            return Err(DnpError::validation("decoder config", "n_f must be positive"));
        }
        if config.stages > 8 {
            return Err(DnpError::validation("decoder config", "at most 8 upsampling stages"));
        }
        Ok(Self { config })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet<f32>, rng: &mut R) {
        let ch = self.config.channels();
        let leaky_gain = 1.0 + 0.2f64 * 0.2;
        for s in 0..self.config.stages {
            let (ci, co) = (ch[s], ch[s + 1]);
            let bound = (6.0 / (leaky_gain * (ci * 9) as f64)).sqrt();
            params.insert(
                format!("decoder.s{s}.k"),
                Tensor::uniform(&[co, ci, 3, 3], bound, rng).with_requires_grad(true),
            );
            params.insert(format!("decoder.s{s}.b"), Tensor::zeros(&[co]).with_requires_grad(true));
        }
        let ci = *ch.last().expect("non-empty");
        let bound = (6.0 / ((ci + 3) * 9) as f64).sqrt();
        params.insert(
            "decoder.out.k",
            Tensor::uniform(&[3, ci, 3, 3], bound, rng).with_requires_grad(true),
        );
        params.insert("decoder.out.b", Tensor::zeros(&[3]).with_requires_grad(true));
    }

    /// `n_f x H_f x W_f` feature map to a `3 x H x W` image in `[0, 1]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, params: &ParamSet<T>, features: Var) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[0] != self.config.n_f {
            return Err(DnpError::Contract(format!(
                "decoder expects a {} x H x W feature map, got {shape:?}",
                self.config.n_f
            )));
        }
        let mut x = features;
        for s in 0..self.config.stages {
            let k = g.param(params, params.id(&format!("decoder.s{s}.k"))?);
            let b = g.param(params, params.id(&format!("decoder.s{s}.b"))?);
            x = g.upsample2x(x)?;
            x = g.conv2d(x, k, Some(b), 1, 1)?;
            x = g.activate(x, Activation::LEAKY);
        }
        let k = g.param(params, params.id("decoder.out.k")?);
        let b = g.param(params, params.id("decoder.out.b")?);
        let y = g.conv2d(x, k, Some(b), 1, 1)?;
        Ok(g.activate(y, Activation::Sigmoid))
    }

    /// Inference convenience wrapper around [`Decoder::forward`].
    pub fn decode(&self, params: &ParamSet<f32>, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let f = g.input(features, false);
        let y = self.forward(&mut g, params, f)?;
        Ok(g.tensor(y))
    }
}
