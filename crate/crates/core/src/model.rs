//! Model configuration, the variant ladder, parameter initialization and the
//! forward graph shared by training, gradient checks and rendering.

use numcore::{Element, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioConfig, AudioNet, AudioWindow};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoding::{ConditioningLayout, EncodingConfig};
use crate::error::{DnpError, Result};
use crate::field::{lifted_row, FieldConfig, FieldMlp, LatentInput};

/// Ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Coordinate MLP predicting colour at full resolution.
    A,
    /// Decoder fed by a learned per-frame tensor, no field.
    B,
    /// Field MLP plus decoder.
    C,
    /// C with per-frame latents.
    D,
    /// D with the side colour loss.
    E,
    /// E with gaze input.
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn uses_field(self) -> bool {
        self != Variant::B
    }

    pub fn uses_decoder(self) -> bool {
        self != Variant::A
    }

    pub fn uses_latent(self) -> bool {
        matches!(self, Variant::D | Variant::E | Variant::F)
    }

    pub fn side_loss(self) -> bool {
        matches!(self, Variant::E | Variant::F)
    }

    pub fn uses_gaze(self) -> bool {
        self == Variant::F
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::F => "F",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    Expression,
    Audio,
}

/// Architecture size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 4 x 128 trunk, 4 x 4 field grid, two decoder stages.
    Tiny,
    /// 4 x 128 trunk, three decoder stages.
    Desk,
    /// 8 x 256 trunk, three decoder stages.
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Some(Preset::Tiny),
            "desk" => Some(Preset::Desk),
            "full" => Some(Preset::Full),
            _ => None,
        }
    }
}

/// Affine map of the three pose translations onto `[-1, 1]`, fitted on the
/// training range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNorm {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for PoseNorm {
    fn default() -> Self {
        Self {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        }
    }
}

impl PoseNorm {
    pub fn fit<'a>(poses: impl IntoIterator<Item = &'a [f64; 6]>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in poses {
            for k in 0..3 {
                lo[k] = lo[k].min(p[3 + k]);
                hi[k] = hi[k].max(p[3 + k]);
            }
        }
        if lo[0].is_infinite() {
            return Self::default();
        }
        Self { lo, hi }
    }

    pub fn apply(&self, pose: &[f64; 6]) -> [f64; 6] {
        let mut out = *pose;
        for k in 0..3 {
            let span = self.hi[k] - self.lo[k];
            let mid = 0.5 * (self.hi[k] + self.lo[k]);
            out[3 + k] = if span > 1e-12 { 2.0 * (pose[3 + k] - mid) / span } else { pose[3 + k] - mid };
        }
        out
    }
}

/// Closed interval per input dimension, reported to clients.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRanges {
    pub pose: Vec<Range>,
    pub expression: Vec<Range>,
    pub gaze: Vec<Range>,
}

impl InputRanges {
    pub fn symmetric(pose: [f64; 6], n_exp: usize, gaze: [f64; 2]) -> Self {
        Self {
            pose: pose.iter().map(|&b| [-b, b]).collect(),
            expression: vec![[-1.0, 1.0]; n_exp],
            gaze: gaze.iter().map(|&b| [-b, b]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mode: DriveMode,
    pub height: usize,
    pub width: usize,
    pub encoding: EncodingConfig,
    pub field: FieldConfig,
    pub decoder: DecoderConfig,
    pub n_exp: usize,
    pub n_v: usize,
    pub audio: AudioConfig,
    pub train_frames: usize,
    pub pose_norm: PoseNorm,
    pub ranges: InputRanges,
}

impl ModelConfig {
    pub fn preset(preset: Preset, variant: Variant, mode: DriveMode, res: usize, n_exp: usize, train_frames: usize) -> Self {
        let (mut field, stages, audio) = match preset {
            Preset::Tiny => {
                let mut f = FieldConfig::desk();
                f.n_f = 16;
                (f, 2, AudioConfig::tiny())
            }
            Preset::Desk => (FieldConfig::desk(), 3, AudioConfig::default()),
            Preset::Full => (FieldConfig::full(), 3, AudioConfig::default()),
        };
        field.feature_head = variant != Variant::A;
        Self {
            variant,
            mode,
            height: res,
            width: res,
            encoding: EncodingConfig::default(),
            decoder: DecoderConfig::new(stages, field.n_f),
            field,
            n_exp,
            n_v: 32,
            audio,
            train_frames: train_frames.max(1),
            pose_norm: PoseNorm::default(),
            ranges: InputRanges::symmetric([0.35, 0.25, 0.2, 0.12, 0.06, 0.1], n_exp, [0.5, 0.3]),
        }
    }

    pub fn layout(&self) -> ConditioningLayout {
        ConditioningLayout {
            encoding: self.encoding,
            n_e: self.drive_len(),
            use_gaze: self.variant.uses_gaze(),
            n_v: if self.variant.uses_latent() { self.n_v } else { 0 },
        }
    }

    /// Width of the expression block, or of the audio code in audio mode.
    pub fn drive_len(&self) -> usize {
        match self.mode {
            DriveMode::Expression => self.n_exp,
            DriveMode::Audio => self.audio.n_a,
        }
    }

    /// Field grid for an `h x w` output.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.variant == Variant::A {
            return Ok((h, w));
        }
        let s = self.decoder.scale();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(DnpError::validation(
                "resolution",
                format!("{h}x{w} is not a multiple of the decoder scale {s}"),
            ));
        }
        Ok((h / s, w / s))
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid_for(self.height, self.width).expect("validated config")
    }

    pub fn field_mlp(&self) -> Result<FieldMlp> {
        FieldMlp::new(self.field, self.layout())
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Decoder::new(self.decoder)
    }

    pub fn audio_net(&self) -> Result<AudioNet> {
        AudioNet::new(self.audio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DriveMode::Expression && self.n_exp == 0 {
            return Err(DnpError::validation("model config", "n_exp must be positive"));
        }
        if self.variant.uses_latent() && self.n_v == 0 {
            return Err(DnpError::validation("model config", "latent variants need n_v > 0"));
        }
        if self.field.feature_head != (self.variant != Variant::A) {
            return Err(DnpError::validation(
                "model config",
                "only the colour-only baseline omits the feature head",
            ));
        }
        if self.variant.uses_decoder() && self.decoder.n_f != self.field.n_f {
            return Err(DnpError::validation("model config", "decoder and field disagree on n_f"));
        }
        self.field_mlp()?;
        self.decoder()?;
        self.audio_net()?;
        self.grid_for(self.height, self.width)?;
        Ok(())
    }
}

/// Where the drive block of the conditioning vector comes from.
#[derive(Debug, Clone, Copy)]
pub enum DriveSource<'a> {
    Expression(&'a [f64]),
    /// The eight windows around the frame, encoded and mixed in-graph.
    AudioWindows(&'a [AudioWindow]),
    /// A precomputed mixed audio code.
    AudioCode(&'a [f64]),
}

/// Conditioning of one frame as consumed by [`forward`].
#[derive(Debug, Clone)]
pub struct FrameInput<'a> {
    pub pose: [f64; 6],
    pub gaze: [f64; 2],
    pub drive: DriveSource<'a>,
    pub latent: LatentInput,
}

/// Output handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `3 x H x W` for decoder variants, `HW x 3` for the baseline.
    pub image: Var,
    pub channels_last: bool,
    /// `H_f W_f x 3` side colour map, when the field has a colour head and a
    /// decoder.
    pub side: Option<Var>,
}

pub const LATENTS: &str = "latents";
pub const LATENT_MEAN: &str = "latents.mean";
pub const BTABLE: &str = "btable";
pub const BTABLE_MEAN: &str = "btable.mean";

/// Builds the `1 x nonspatial_len` conditioning row for a frame.
pub fn conditioning_row<T: Element>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    frame: &FrameInput<'_>,
) -> Result<Var> {
    let layout = cfg.layout();
    let pose = cfg.pose_norm.apply(&frame.pose);
    let lifted = lifted_row(&layout, &pose, &frame.gaze);
    let mut parts = vec![g.constant(&[1, lifted.len()], lifted.into_iter().map(T::of).collect())?];
    let n_e = cfg.drive_len();
    let drive = match (cfg.mode, frame.drive) {
        (DriveMode::Expression, DriveSource::Expression(e)) | (DriveMode::Audio, DriveSource::AudioCode(e)) => {
            if e.len() != n_e {
                let what = if cfg.mode == DriveMode::Audio { "audio code" } else { "expression" };
                return Err(DnpError::Contract(format!("{what} has {} entries, model expects {n_e}", e.len())));
            }
            g.constant(&[1, n_e], e.iter().map(|&v| T::of(v)).collect())?
        }
        (DriveMode::Audio, DriveSource::AudioWindows(ws)) => cfg.audio_net()?.condition(g, params, ws)?,
        (mode, _) => {
            return Err(DnpError::Mode(format!(
                "model is driven by {mode:?} input but received a different drive signal"
            )))
        }
    };
    parts.push(drive);
    if layout.n_v > 0 {
        let v = match &frame.latent {
            LatentInput::Row(i) => {
                if *i >= cfg.train_frames {
                    return Err(DnpError::Index {
                        index: *i,
                        len: cfg.train_frames,
                    });
                }
                g.param_slice(params, params.id(LATENTS)?, *i)?
            }
            LatentInput::Mean => {
                let m = g.param(params, params.id(LATENT_MEAN)?);
                g.reshape(m, &[1, layout.n_v])?
            }
            LatentInput::Explicit(v) => {
                if v.len() != layout.n_v {
                    return Err(DnpError::Contract(format!(
                        "latent has {} entries, model expects {}",
                        v.len(),
                        layout.n_v
                    )));
                }
                g.constant(&[1, layout.n_v], v.iter().map(|&x| T::of(x)).collect())?
            }
        };
        parts.push(v);
    }
    Ok(g.concat_cols(&parts)?)
}

/// Field/decoder forward pass for one frame at `h x w`. `spatial` must be
/// the grid encoding for that resolution (see [`crate::field::grid_encoding`]).
pub fn forward<T: Element>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    frame: &FrameInput<'_>,
    spatial: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<ForwardOut> {
    let (hf, wf) = cfg.grid_for(h, w)?;
    if cfg.variant == Variant::B {
        if (h, w) != (cfg.height, cfg.width) {
            return Err(DnpError::Contract(format!(
                "the learned-input variant only renders at its training resolution {}x{}",
                cfg.height, cfg.width
            )));
        }
        let f = match &frame.latent {
            LatentInput::Row(i) => {
                if *i >= cfg.train_frames {
                    return Err(DnpError::Index {
                        index: *i,
                        len: cfg.train_frames,
                    });
                }
                g.param_slice(params, params.id(BTABLE)?, *i)?
            }
            LatentInput::Mean => g.param(params, params.id(BTABLE_MEAN)?),
            LatentInput::Explicit(_) => {
                return Err(DnpError::Mode("the learned-input variant has no explicit latent".into()))
            }
        };
        let image = cfg.decoder()?.forward(g, params, f)?;
        return Ok(ForwardOut {
            image,
            channels_last: false,
            side: None,
        });
    }
    let ds = cfg.layout().spatial_len();
    if spatial.shape() != [hf * wf, ds] {
        return Err(DnpError::Contract(format!(
            "spatial encoding has shape {:?}, expected [{}, {ds}]",
            spatial.shape(),
            hf * wf
        )));
    }
    let cond = conditioning_row(cfg, g, params, frame)?;
    let s = g.input(spatial, false);
    field_and_decode(cfg, g, params, s, cond, hf, wf)
}

/// Everything after the conditioning row.
pub fn field_and_decode<T: Element>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    spatial: Var,
    cond: Var,
    hf: usize,
    wf: usize,
) -> Result<ForwardOut> {
    let out = cfg.field_mlp()?.forward(g, params, spatial, cond)?;
    if cfg.variant == Variant::A {
        return Ok(ForwardOut {
            image: out.color,
            channels_last: true,
            side: None,
        });
    }
    let feats = out.features.expect("hybrid variants have a feature head");
    let t = g.transpose(feats)?;
    let fmap = g.reshape(t, &[cfg.field.n_f, hf, wf])?;
    let image = cfg.decoder()?.forward(g, params, fmap)?;
    Ok(ForwardOut {
        image,
        channels_last: false,
        side: Some(out.color),
    })
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let v = config.variant;
        if v.uses_field() {
            config.field_mlp()?.init(&mut params, &mut rng);
        }
        if v.uses_decoder() {
            config.decoder()?.init(&mut params, &mut rng);
        }
        if config.mode == DriveMode::Audio && v.uses_field() {
            config.audio_net()?.init(&mut params, &mut rng);
        }
        if v.uses_latent() {
            params.insert(
                LATENTS,
                Tensor::zeros(&[config.train_frames, config.n_v]).with_requires_grad(true),
            );
            params.insert(LATENT_MEAN, Tensor::zeros(&[config.n_v]));
        }
        if v == Variant::B {
            let (hf, wf) = config.grid();
            let n_f = config.decoder.n_f;
            params.insert(
                BTABLE,
                Tensor::randn(&[config.train_frames, n_f, hf, wf], 0.1, &mut rng).with_requires_grad(true),
            );
            params.insert(BTABLE_MEAN, Tensor::zeros(&[n_f, hf, wf]));
        }
        let mut m = Self { config, params };
        m.refresh_means()?;
        Ok(m)
    }

    /// Recomputes the cached means of the per-frame tables.
    pub fn refresh_means(&mut self) -> Result<()> {
        for (table, mean) in [(LATENTS, LATENT_MEAN), (BTABLE, BTABLE_MEAN)] {
            if !self.params.contains(table) {
                continue;
            }
            let t = self.params.by_name(table)?;
            let rows = t.shape()[0];
            let inner = t.len() / rows;
            let mut acc = vec![0.0f64; inner];
            for r in t.data().chunks_exact(inner) {
                for (a, &x) in acc.iter_mut().zip(r) {
                    *a += x as f64;
                }
            }
            let values: Vec<f32> = acc.iter().map(|a| (a / rows as f64) as f32).collect();
            let id = self.params.id(mean)?;
            self.params.get_mut(id).data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn mean_latent(&self) -> Option<&[f32]> {
        self.params.by_name(LATENT_MEAN).ok().map(|t| t.data())
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, _, t)| t.len())
            .sum()
    }
}
