//! Inference: conditioning rows, grid caching and image assembly.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use numcore::{Graph, Tensor};
use rayon::prelude::*;

use crate::audio::AudioTrack;
use crate::error::{DnpError, Result};
use crate::field::{grid_encoding, ConditioningInput, Drive, LatentInput};
use crate::model::{conditioning_row, field_and_decode, forward, DriveMode, DriveSource, FrameInput, Model, Variant};
use crate::raster::Image;
use crate::tracks::FrameTrack;

/// Largest number of field cells evaluated in one graph.
pub const TILE_CELLS: usize = 4096;

/// Renders frames from a fixed model. Shareable across threads.
#[derive(Debug)]
pub struct Renderer {
    model: Model,
    spatial: Mutex<HashMap<(usize, usize), Arc<Tensor<f32>>>>,
}

impl Renderer {
    pub fn new(model: Model) -> Result<Self> {
        model.config.validate()?;
        Ok(Self {
            model,
            spatial: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Cached spatial encoding of the field grid for an `h x w` output.
    pub fn spatial_for(&self, h: usize, w: usize) -> Result<Arc<Tensor<f32>>> {
        let (hf, wf) = self.model.config.grid_for(h, w)?;
        let mut cache = self.spatial.lock().expect("cache lock");
        Ok(cache
            .entry((hf, wf))
            .or_insert_with(|| Arc::new(grid_encoding(hf, wf, &self.model.config.layout())))
            .clone())
    }

    /// The per-frame conditioning row, computed once per frame.
    pub fn conditioning(&self, frame: &FrameInput<'_>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let row = conditioning_row(&self.model.config, &mut g, &self.model.params, frame)?;
        Ok(g.value(row).to_vec())
    }

    /// Renders at the model's native resolution.
    pub fn render_input(&self, frame: &FrameInput<'_>) -> Result<Image> {
        let c = &self.model.config;
        self.render_input_at(frame, c.height, c.width)
    }

    pub fn render_input_at(&self, frame: &FrameInput<'_>, h: usize, w: usize) -> Result<Image> {
        let cfg = &self.model.config;
        if cfg.variant == Variant::B {
            let mut g = Graph::new();
            let dummy = Tensor::zeros(&[1, 1]);
            let out = forward(cfg, &mut g, &self.model.params, frame, &dummy, h, w)?;
            return Image::from_chw(h, w, g.value(out.image));
        }
        let row = self.conditioning(frame)?;
        self.render_row(&row, h, w)
    }

    /// Field and decoder from a precomputed conditioning row.
    pub fn render_row(&self, cond: &[f32], h: usize, w: usize) -> Result<Image> {
        let cfg = &self.model.config;
        if cfg.variant == Variant::B {
            return Err(DnpError::Mode("the learned-input variant has no conditioning row".into()));
        }
        let expected = cfg.layout().nonspatial_len();
        if cond.len() != expected {
            return Err(DnpError::Contract(format!(
                "conditioning row has {} entries, model expects {expected}",
                cond.len()
            )));
        }
        let (hf, wf) = cfg.grid_for(h, w)?;
        let spatial = self.spatial_for(h, w)?;
        let cells = hf * wf;
        if cfg.variant == Variant::A && cells > TILE_CELLS {
            let mlp = cfg.field_mlp()?;
            let ds = cfg.layout().spatial_len();
            let tiles = spatial
                .data()
                .par_chunks(TILE_CELLS * ds)
                .map(|chunk| {
                    let rows = chunk.len() / ds;
                    let mut g = Graph::new();
                    let s = g.constant(&[rows, ds], chunk.to_vec())?;
                    let c = g.constant(&[1, cond.len()], cond.to_vec())?;
                    let out = mlp.forward(&mut g, &self.model.params, s, c)?;
                    Ok(g.value(out.color).to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            return Image::new(h, w, tiles.concat());
        }
        let mut g = Graph::new();
        let s = g.input(&spatial, false);
        let c = g.constant(&[1, cond.len()], cond.to_vec())?;
        let out = field_and_decode(cfg, &mut g, &self.model.params, s, c, hf, wf)?;
        let data = g.value(out.image);
        if out.channels_last {
            Image::new(h, w, data.to_vec())
        } else {
            Image::from_chw(h, w, data)
        }
    }

    /// Renders a client-supplied conditioning at native resolution.
    pub fn render(&self, cond: &ConditioningInput) -> Result<Image> {
        let c = &self.model.config;
        self.render_at(cond, c.height, c.width)
    }

    pub fn render_at(&self, cond: &ConditioningInput, h: usize, w: usize) -> Result<Image> {
        let drive = match &cond.drive {
            Drive::Expression(e) => DriveSource::Expression(e),
            Drive::AudioCode(a) => DriveSource::AudioCode(a),
        };
        let frame = FrameInput {
            pose: cond.pose,
            gaze: cond.gaze,
            drive,
            latent: cond.latent.clone(),
        };
        self.render_input_at(&frame, h, w)
    }
}

/// One-shot render of a conditioning input.
pub fn render_frame(model: &Model, cond: &ConditioningInput) -> Result<Image> {
    Renderer::new(model.clone())?.render(cond)
}

fn check_track_dims(model: &Model, tracks: &[FrameTrack]) -> Result<()> {
    let n_exp = model.config.n_exp;
    for (k, t) in tracks.iter().enumerate() {
        if model.config.mode == DriveMode::Expression && t.expression.len() != n_exp {
            return Err(DnpError::validation(
                "track",
                format!("line {}: {} expression values, model expects {n_exp}", k + 1, t.expression.len()),
            ));
        }
    }
    Ok(())
}

/// Renders a driving track with the mean latent.
pub fn reenact(model: &Model, tracks: &[FrameTrack]) -> Result<Vec<Image>> {
    if model.config.mode != DriveMode::Expression {
        return Err(DnpError::Mode("expression tracks need an expression-driven model".into()));
    }
    check_track_dims(model, tracks)?;
    let renderer = Renderer::new(model.clone())?;
    tracks
        .par_iter()
        .map(|t| {
            renderer.render_input(&FrameInput {
                pose: t.pose,
                gaze: t.gaze,
                drive: DriveSource::Expression(&t.expression),
                latent: LatentInput::Mean,
            })
        })
        .collect()
}

/// Audio-driven rendering: pose and gaze from `tracks`, mouth from `audio`.
pub fn audio_drive(model: &Model, tracks: &[FrameTrack], audio: &AudioTrack) -> Result<Vec<Image>> {
    if model.config.mode != DriveMode::Audio {
        return Err(DnpError::Mode("audio features need an audio-driven model".into()));
    }
    if audio.frames() != tracks.len() {
        return Err(DnpError::validation(
            "audio",
            format!("{} audio frames for {} track frames", audio.frames(), tracks.len()),
        ));
    }
    let renderer = Renderer::new(model.clone())?;
    (0..tracks.len())
        .into_par_iter()
        .map(|i| {
            let windows = audio.mix_windows(i)?;
            let t = &tracks[i];
            renderer.render_input(&FrameInput {
                pose: t.pose,
                gaze: t.gaze,
                drive: DriveSource::AudioWindows(&windows),
                latent: LatentInput::Mean,
            })
        })
        .collect()
}
