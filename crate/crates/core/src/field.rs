//! Conditioned coordinate MLP.
//!
//! Each grid cell is evaluated independently from its lifted coordinate and a
//! per-frame conditioning row. The first layer (and the skip layer) split
//! their weights into a spatial part and a conditioning part, so the
//! conditioning row is projected once per frame and broadcast over the grid.

use std::cell::Cell;

use numcore::{Activation, Element, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_coord, encode_lifted, ConditioningLayout};
use crate::error::{DnpError, Result};

/// Per-frame driving signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInput {
    /// Three Euler angles (rad) then three translations.
    pub pose: [f64; 6],
    pub drive: Drive,
    /// Yaw and pitch (rad).
    pub gaze: [f64; 2],
    pub latent: LatentInput,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Drive {
    Expression(Vec<f64>),
    /// A mixed audio code α.
    AudioCode(Vec<f64>),
}

impl Drive {
    pub fn values(&self) -> &[f64] {
        match self {
            Drive::Expression(v) | Drive::AudioCode(v) => v,
        }
    }
}

/// Which per-frame latent (or, for the decoder-only variant, which learned
/// input tensor) to use.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentInput {
    /// Row of the training table.
    Row(usize),
    /// The cached mean of the training table.
    Mean,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    /// Hidden layer that additionally receives the encoded input.
    pub skip_at: Option<usize>,
    pub n_f: usize,
    /// The pure-colour baseline has no feature head.
    pub feature_head: bool,
}

impl FieldConfig {
    /// 8 x 256 trunk with a skip into layer 5.
    pub fn full() -> Self {
        Self {
            depth: 8,
            width: 256,
            skip_at: Some(5),
            n_f: 64,
            feature_head: true,
        }
    }

    /// 4 x 128 trunk with a skip into layer 2.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 128,
            skip_at: Some(2),
            n_f: 64,
            feature_head: true,
        }
    }
}

/// Feature and colour maps on the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMaps {
    /// `n_f x H_f x W_f`
    pub features: Tensor<f32>,
    /// `3 x H_f x W_f`, values in `[0, 1]`.
    pub color: Tensor<f32>,
}

/// Graph handles produced by one field evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FieldOut {
    /// `P x n_f`
    pub features: Option<Var>,
    /// `P x 3`
    pub color: Var,
}

thread_local! {
    static NONSPATIAL_ENCODES: Cell<u64> = const { Cell::new(0) };
}

/// Number of per-frame conditioning rows assembled on this thread.
pub fn nonspatial_encode_count() -> u64 {
    NONSPATIAL_ENCODES.with(Cell::get)
}

/// Lifted, non-learned part of the conditioning row: `[γ(p), γ(g)?]` with
/// translations already normalized.
pub fn lifted_row(layout: &ConditioningLayout, pose: &[f64; 6], gaze: &[f64; 2]) -> Vec<f64> {
    NONSPATIAL_ENCODES.with(|c| c.set(c.get() + 1));
    encode_lifted(pose, layout.use_gaze.then_some(gaze), &layout.encoding)
}

/// `[γ(x), γ(y)]` for every cell of an `h x w` grid, row-major, pixel centres.
pub fn grid_encoding<T: Element>(h: usize, w: usize, layout: &ConditioningLayout) -> Tensor<T> {
    let ds = layout.spatial_len();
    let mut data = Vec::with_capacity(h * w * ds);
    for i in 0..h {
        for j in 0..w {
            let coord = [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64];
            data.extend(encode_coord(coord, &layout.encoding).into_iter().map(T::of));
        }
    }
    Tensor::from_vec(&[h * w, ds], data).expect("grid encoding shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMlp {
    pub config: FieldConfig,
    pub layout: ConditioningLayout,
}

fn name(layer: usize, what: &str) -> String {
    format!("field.l{layer}.{what}")
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng).with_requires_grad(true)
}

fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<f32> {
    Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng).with_requires_grad(true)
}

fn zeros(n: usize) -> Tensor<f32> {
    Tensor::zeros(&[n]).with_requires_grad(true)
}

impl FieldMlp {
    pub fn new(config: FieldConfig, layout: ConditioningLayout) -> Result<Self> {
        if config.depth == 0 || config.width == 0 {
            return Err(DnpError::validation("field config", "depth and width must be positive"));
        }
        if let Some(s) = config.skip_at {
            if s == 0 || s >= config.depth {
                return Err(DnpError::validation(
                    "field config",
                    format!("skip layer {s} must lie in 1..{}", config.depth),
                ));
            }
        }
        if config.feature_head && config.n_f == 0 {
            return Err(DnpError::validation("field config", "n_f must be positive"));
        }
        Ok(Self { config, layout })
    }

    /// Encoded input width (must equal the conditioning vector length).
    pub fn input_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet<f32>, rng: &mut R) {
        let (ds, dc, w) = (self.layout.spatial_len(), self.layout.nonspatial_len(), self.config.width);
        for l in 0..self.config.depth {
            let input_part = l == 0 || Some(l) == self.config.skip_at;
            let hidden_in = if l == 0 { 0 } else { w };
            let fan_in = hidden_in + if input_part { ds + dc } else { 0 };
            if hidden_in > 0 {
                let key = if input_part { "w_h" } else { "w" };
                params.insert(name(l, key), he_uniform(&[w, w], fan_in, rng));
            }
            if input_part {
                params.insert(name(l, "w_x"), he_uniform(&[ds, w], fan_in, rng));
                params.insert(name(l, "w_c"), he_uniform(&[dc, w], fan_in, rng));
            }
            params.insert(name(l, "b"), zeros(w));
        }
        if self.config.feature_head {
            params.insert("field.feat.w", xavier_uniform(&[w, self.config.n_f], w, self.config.n_f, rng));
            params.insert("field.feat.b", zeros(self.config.n_f));
        }
        params.insert("field.color.w", xavier_uniform(&[w, 3], w, 3, rng));
        params.insert("field.color.b", zeros(3));
    }

    /// Evaluates the trunk and heads for `P` cells.
    ///
    /// `spatial` is `P x spatial_len`, `cond` is a `1 x nonspatial_len` row
    /// shared by all cells.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        spatial: Var,
        cond: Var,
    ) -> Result<FieldOut> {
        let ds = self.layout.spatial_len();
        let dc = self.layout.nonspatial_len();
        if g.shape(spatial).last() != Some(&ds) {
            return Err(DnpError::Contract(format!(
                "spatial block has shape {:?}, expected width {ds}",
                g.shape(spatial)
            )));
        }
        if g.value(cond).len() != dc {
            return Err(DnpError::Contract(format!(
                "conditioning row has {} entries, model expects {dc}",
                g.value(cond).len()
            )));
        }
        let p = |g: &mut Graph<T>, n: &str| -> Result<Var> { Ok(g.param(params, params.id(n)?)) };
        let mut h: Option<Var> = None;
        for l in 0..self.config.depth {
            let input_part = l == 0 || Some(l) == self.config.skip_at;
            let mut pre = match h {
                Some(prev) => {
                    let key = if input_part { "w_h" } else { "w" };
                    let w = p(g, &name(l, key))?;
                    Some(g.matmul(prev, w)?)
                }
                None => None,
            };
            let b = p(g, &name(l, "b"))?;
            let row = if input_part {
                let wx = p(g, &name(l, "w_x"))?;
                let xs = g.matmul(spatial, wx)?;
                pre = Some(match pre {
                    Some(a) => g.add(a, xs)?,
                    None => xs,
                });
                let wc = p(g, &name(l, "w_c"))?;
                let c = g.matmul(cond, wc)?;
                let c = g.reshape(c, &[self.config.width])?;
                g.add(c, b)?
            } else {
                b
            };
            let pre = g.add_row(pre.expect("layer has an input"), row)?;
            h = Some(g.activate(pre, Activation::Relu));
        }
        let h = h.expect("depth > 0");
        let features = if self.config.feature_head {
            let w = p(g, "field.feat.w")?;
            let b = p(g, "field.feat.b")?;
            let f = g.matmul(h, w)?;
            Some(g.add_row(f, b)?)
        } else {
            None
        };
        let w = p(g, "field.color.w")?;
        let b = p(g, "field.color.b")?;
        let c = g.matmul(h, w)?;
        let c = g.add_row(c, b)?;
        let color = g.activate(c, Activation::Sigmoid);
        Ok(FieldOut { features, color })
    }

    /// Single-cell evaluation from a full encoded vector `[γ(x), γ(y), rest]`.
    pub fn field_forward(&self, params: &ParamSet<f32>, encoded: &[f64]) -> Result<(Vec<f32>, [f32; 3])> {
        if encoded.len() != self.input_len() {
            return Err(DnpError::Contract(format!(
                "encoded input has {} entries, model expects {}",
                encoded.len(),
                self.input_len()
            )));
        }
        let ds = self.layout.spatial_len();
        let mut g = Graph::new();
        let s = g.constant(&[1, ds], encoded[..ds].iter().map(|&v| v as f32).collect())?;
        let c = g.constant(&[1, encoded.len() - ds], encoded[ds..].iter().map(|&v| v as f32).collect())?;
        let out = self.forward(&mut g, params, s, c)?;
        let f = out.features.map(|v| g.value(v).to_vec()).unwrap_or_default();
        let col = g.value(out.color);
        Ok((f, [col[0], col[1], col[2]]))
    }

    /// Evaluates every cell of the grid described by `spatial` (`P x ds`, see
    /// [`grid_encoding`]) in independent row tiles of at most `tile` cells.
    pub fn evaluate_rows(
        &self,
        params: &ParamSet<f32>,
        spatial: &Tensor<f32>,
        cond_row: &[f32],
        tile: usize,
    ) -> Result<(Option<Vec<f32>>, Vec<f32>)> {
        let ds = self.layout.spatial_len();
        let cells = spatial.len() / ds;
        let tile = tile.max(1);
        let mut features = self.config.feature_head.then(|| Vec::with_capacity(cells * self.config.n_f));
        let mut color = Vec::with_capacity(cells * 3);
        for start in (0..cells).step_by(tile) {
            let end = (start + tile).min(cells);
            let mut g = Graph::new();
            let s = g.constant(&[end - start, ds], spatial.data()[start * ds..end * ds].to_vec())?;
            let c = g.constant(&[1, cond_row.len()], cond_row.to_vec())?;
            let out = self.forward(&mut g, params, s, c)?;
            if let (Some(buf), Some(f)) = (features.as_mut(), out.features) {
                buf.extend_from_slice(g.value(f));
            }
            color.extend_from_slice(g.value(out.color));
        }
        Ok((features, color))
    }

    /// Feature and colour maps for an `h x w` grid.
    pub fn evaluate_grid(
        &self,
        params: &ParamSet<f32>,
        cond_row: &[f32],
        h: usize,
        w: usize,
    ) -> Result<FieldMaps> {
        let spatial = grid_encoding::<f32>(h, w, &self.layout);
        let (features, color) = self.evaluate_rows(params, &spatial, cond_row, 4096)?;
        let features = features
            .ok_or_else(|| DnpError::Mode("the colour-only baseline has no feature map".into()))?;
        Ok(FieldMaps {
            features: Tensor::from_vec(&[self.config.n_f, h, w], channels_first(&features, h * w, self.config.n_f))?,
            color: Tensor::from_vec(&[3, h, w], channels_first(&color, h * w, 3))?,
        })
    }
}

/// `[P x c]` row-major to `[c x P]`.
pub fn channels_first(x: &[f32], cells: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for p in 0..cells {
        for c in 0..channels {
            out[c * cells + p] = x[p * channels + c];
        }
    }
    out
}

/// `[c x P]` to `[P x c]`.
pub fn channels_last(x: &[f32], cells: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for p in 0..cells {
            out[p * channels + c] = x[c * cells + p];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> ConditioningLayout {
        ConditioningLayout {
            encoding: EncodingConfig { n_x: 3, n_p: 2, n_g: 2 },
            n_e: 4,
            use_gaze: true,
            n_v: 5,
        }
    }

    fn small() -> (FieldMlp, ParamSet<f32>) {
        let cfg = FieldConfig {
            depth: 3,
            width: 16,
            skip_at: Some(2),
            n_f: 6,
            feature_head: true,
        };
        let mlp = FieldMlp::new(cfg, layout()).unwrap();
        let mut params = ParamSet::new();
        mlp.init(&mut params, &mut ChaCha8Rng::seed_from_u64(4));
        (mlp, params)
    }

    #[test]
    fn zero_weights_give_half_grey() {
        let (mlp, mut params) = small();
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).data_mut().fill(0.0);
        }
        let enc = vec![0.3; mlp.input_len()];
        let (f, c) = mlp.field_forward(&params, &enc).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        assert_eq!(c, [0.5; 3]);
    }

    #[test]
    fn latent_pathway_is_wired() {
        let (mlp, params) = small();
        let mut enc: Vec<f64> = (0..mlp.input_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (f1, _) = mlp.field_forward(&params, &enc).unwrap();
        let (f1b, _) = mlp.field_forward(&params, &enc).unwrap();
        assert_eq!(f1, f1b);
        let n = enc.len();
        enc[n - 1] += 0.5;
        let (f2, _) = mlp.field_forward(&params, &enc).unwrap();
        let diff: f32 = f1.iter().zip(&f2).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff > 0.0);
        assert!(mlp.field_forward(&params, &enc[1..]).is_err());
    }

    #[test]
    fn layout_helpers_invert() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(channels_last(&channels_first(&x, 4, 3), 4, 3), x);
    }

    #[test]
    fn bad_skip_rejected() {
        let mut cfg = FieldConfig::desk();
        cfg.skip_at = Some(4);
        assert!(FieldMlp::new(cfg, layout()).is_err());
    }
}
