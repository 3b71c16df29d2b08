//! Finite-difference checks of the full training loss.

use numcore::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioTrack, FEATURE_DIM};
use crate::error::Result;
use crate::field::{grid_encoding, LatentInput};
use crate::model::{DriveMode, DriveSource, FrameInput, Model, ModelConfig, Preset, Variant};
use crate::training::loss_graph;

/// Resolution of the tiny preset: a 4 x 4 field grid under two decoder
/// stages.
pub const TINY_RES: usize = 16;

/// Checks `d loss / d θ` for every trainable tensor of `cfg` on one random
/// frame, in double precision.
pub fn check_config(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = Model::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c0d);
    let mut params: ParamSet<f64> = model.params.cast();
    // Non-zero per-frame tables so their gradients are generic.
    for name in [crate::model::LATENTS] {
        if let Ok(id) = params.id(name) {
            let t = params.get_mut(id);
            let noise = Tensor::<f64>::randn(t.shape(), 0.5, &mut rng);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = cfg.grid();
    let spatial: Tensor<f64> = grid_encoding(hf, wf, &cfg.layout());
    let target = Tensor::<f64>::uniform(&[3 * h * w], 0.5, &mut rng).data().iter().map(|v| v + 0.5).collect::<Vec<_>>();
    let side = Tensor::<f64>::uniform(&[3 * hf * wf], 0.5, &mut rng).data().iter().map(|v| v + 0.5).collect::<Vec<_>>();
    let expr: Vec<f64> = (0..cfg.n_exp).map(|k| ((k as f64) * 0.7).sin()).collect();
    let track = AudioTrack::new(Tensor::<f32>::randn(&[12, FEATURE_DIM], 1.0, &mut rng))?;
    let windows = track.mix_windows(5)?;
    let drive = match cfg.mode {
        DriveMode::Expression => DriveSource::Expression(&expr),
        DriveMode::Audio => DriveSource::AudioWindows(&windows),
    };
    let frame = FrameInput {
        pose: [0.1, -0.2, 0.05, 0.3, -0.4, 0.2],
        gaze: [0.2, -0.1],
        drive,
        latent: LatentInput::Row(cfg.train_frames.min(2) - 1),
    };
    let f = |g: &mut Graph<f64>, p: &ParamSet<f64>| -> numcore::Result<numcore::Var> {
        loss_graph(cfg, g, p, &frame, &spatial, &target, Some(&side), (1.0, 1.0))
            .map_err(|e| numcore::NumError::contract("loss", e.to_string()))
    };
    Ok(grad_check(f, &mut params, opts)?)
}

/// The tiny-preset configurations that together cover every trainable
/// tensor kind: the full model in expression and audio mode, the colour-only
/// baseline and the learned-input decoder variant.
pub fn tiny_configs() -> Vec<(String, ModelConfig)> {
    let mk = |v: Variant, mode: DriveMode| ModelConfig::preset(Preset::Tiny, v, mode, TINY_RES, 8, 3);
    vec![
        ("F/expression".into(), mk(Variant::F, DriveMode::Expression)),
        ("F/audio".into(), mk(Variant::F, DriveMode::Audio)),
        ("A/expression".into(), mk(Variant::A, DriveMode::Expression)),
        ("B".into(), mk(Variant::B, DriveMode::Expression)),
    ]
}

pub fn check_tiny(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    tiny_configs()
        .into_iter()
        .map(|(name, cfg)| Ok((name, check_config(&cfg, seed, opts)?)))
        .collect()
}
