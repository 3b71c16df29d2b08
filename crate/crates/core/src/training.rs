//! Dual reconstruction loss, the optimization loop and evaluation metrics.

use std::io::Write;
use std::time::Instant;

use numcore::{adam_step, AdamState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioWindow;
use crate::checkpoint::Checkpoint;
use crate::error::{DnpError, Result};
use crate::field::{grid_encoding, LatentInput};
use crate::model::{forward, DriveMode, DriveSource, FrameInput, InputRanges, Model, ModelConfig, PoseNorm, Preset, Variant};
use crate::raster::{psnr_from_mse, Image};
use crate::render::Renderer;
use crate::scene::{estimate_gaze, gaze_angle_deg, mouth_mask, SceneDataset, EXPRESSION_RANGE};

/// Area-average pooling of `img` to `h x w`.
pub fn downscale(img: &Image, h: usize, w: usize) -> Result<Image> {
    img.downscale(h, w)
}

/// `MSE(Ĩ, I) + MSE(C, I')`, both mean-reduced over pixels and channels.
pub fn compute_loss(rendered: &Image, target: &Image, side: &Image, side_target: &Image) -> Result<f64> {
    for (a, b) in [(rendered, target), (side, side_target)] {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(DnpError::Num(numcore::NumError::dim(
                "compute_loss",
                format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
            )));
        }
    }
    Ok(rendered.mse(target)? + side.mse(side_target)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub mode: DriveMode,
    pub preset: Preset,
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    pub rec_weight: f64,
    pub side_weight: f64,
    /// Steps between loss snapshots; 0 disables them.
    pub snapshot_every: u64,
    pub n_v: usize,
    /// Overrides the preset's decoder depth.
    pub stages: Option<usize>,
}

impl TrainConfig {
    pub fn new(variant: Variant, steps: u64, seed: u64) -> Self {
        Self {
            variant,
            mode: DriveMode::Expression,
            preset: Preset::Desk,
            steps,
            lr: 5e-4,
            seed,
            rec_weight: 1.0,
            side_weight: 1.0,
            snapshot_every: 0,
            n_v: 32,
            stages: None,
        }
    }

    /// Cosine decay from `lr` to zero over `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let t = (step as f64 / self.steps as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Model configuration for a dataset.
    pub fn model_config(&self, d: &SceneDataset) -> Result<ModelConfig> {
        d.validate()?;
        if d.train.is_empty() {
            return Err(DnpError::validation("dataset", "no training frames"));
        }
        let mut cfg = ModelConfig::preset(self.preset, self.variant, self.mode, d.spec.height, d.spec.n_exp, d.train.len());
        if d.spec.height != d.spec.width {
            cfg.width = d.spec.width;
        }
        if let Some(s) = self.stages {
            cfg.decoder.stages = s;
        }
        cfg.n_v = self.n_v;
        cfg.pose_norm = PoseNorm::fit(d.train.iter().map(|&i| &d.tracks[i].pose));
        cfg.ranges = InputRanges {
            pose: (0..6).map(|k| value_range(d, |t| t.pose[k])).collect(),
            expression: (0..d.spec.n_exp)
                .map(|k| {
                    let (lo, hi) = EXPRESSION_RANGE[k];
                    [lo, hi]
                })
                .collect(),
            gaze: (0..2).map(|k| value_range(d, |t| t.gaze[k])).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn value_range(d: &SceneDataset, f: impl Fn(&crate::tracks::FrameTrack) -> f64) -> [f64; 2] {
    let vals = d.train.iter().map(|&i| f(&d.tracks[i]));
    let lo = vals.clone().fold(f64::INFINITY, f64::min);
    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
    [lo, hi]
}

/// Checks that a dataset can drive a model configuration.
pub fn check_compatible(cfg: &ModelConfig, d: &SceneDataset) -> Result<()> {
    d.validate()?;
    if (d.spec.height, d.spec.width) != (cfg.height, cfg.width) {
        return Err(DnpError::Mode(format!(
            "model renders {}x{}, dataset frames are {}x{}",
            cfg.height, cfg.width, d.spec.height, d.spec.width
        )));
    }
    if cfg.mode == DriveMode::Expression && d.spec.n_exp != cfg.n_exp {
        return Err(DnpError::Mode(format!(
            "model expects {} expression values, dataset has {}",
            cfg.n_exp, d.spec.n_exp
        )));
    }
    if cfg.mode == DriveMode::Audio && d.audio.is_none() {
        return Err(DnpError::Mode("audio-driven model needs a dataset with an audio track".into()));
    }
    if d.train.len() != cfg.train_frames && (cfg.variant.uses_latent() || cfg.variant == Variant::B) {
        return Err(DnpError::Mode(format!(
            "model has {} per-frame entries, dataset has {} training frames",
            cfg.train_frames,
            d.train.len()
        )));
    }
    Ok(())
}

/// Owned conditioning of one dataset frame.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub pose: [f64; 6],
    pub gaze: [f64; 2],
    pub expression: Vec<f64>,
    pub windows: Vec<AudioWindow>,
    pub latent: LatentInput,
}

impl FrameData {
    /// Frame `i` of `d`: training frames use their latent row, held-out
    /// frames the mean latent.
    pub fn from_dataset(cfg: &ModelConfig, d: &SceneDataset, i: usize) -> Result<Self> {
        if i >= d.len() {
            return Err(DnpError::Index { index: i, len: d.len() });
        }
        let tr = &d.tracks[i];
        let windows = match (cfg.mode, &d.audio) {
            (DriveMode::Audio, Some(a)) => a.mix_windows(i)?,
            (DriveMode::Audio, None) => {
                return Err(DnpError::Mode("audio-driven model needs an audio track".into()))
            }
            _ => Vec::new(),
        };
        let latent = match d.train.binary_search(&i) {
            Ok(row) => LatentInput::Row(row),
            Err(_) => LatentInput::Mean,
        };
        Ok(Self {
            pose: tr.pose,
            gaze: tr.gaze,
            expression: tr.expression.clone(),
            windows,
            latent,
        })
    }

    pub fn input(&self, mode: DriveMode) -> FrameInput<'_> {
        FrameInput {
            pose: self.pose,
            gaze: self.gaze,
            drive: match mode {
                DriveMode::Expression => DriveSource::Expression(&self.expression),
                DriveMode::Audio => DriveSource::AudioWindows(&self.windows),
            },
            latent: self.latent.clone(),
        }
    }
}

struct Target {
    full: Vec<f32>,
    side: Option<Vec<f32>>,
}

/// One loss snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

/// Graph for one training frame: returns the loss variable.
pub fn loss_graph<T: numcore::Element>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    params: &numcore::ParamSet<T>,
    frame: &FrameInput<'_>,
    spatial: &Tensor<T>,
    target: &[T],
    side_target: Option<&[T]>,
    weights: (f64, f64),
) -> Result<Var> {
    let out = forward(cfg, g, params, frame, spatial, cfg.height, cfg.width)?;
    let shape = g.shape(out.image).to_vec();
    let t = g.constant(&shape, target.to_vec())?;
    let rec = g.mse(out.image, t)?;
    let mut loss = g.scale(rec, weights.0);
    if let (Some(side), Some(st), true) = (out.side, side_target, cfg.variant.side_loss()) {
        let shape = g.shape(side).to_vec();
        let t = g.constant(&shape, st.to_vec())?;
        let l = g.mse(side, t)?;
        let l = g.scale(l, weights.1);
        loss = g.add(loss, l)?;
    }
    Ok(loss)
}

/// Stateful optimizer loop over one dataset.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState<f32>,
    pub step: u64,
    data: &'a SceneDataset,
    spatial: Tensor<f32>,
    frames: Vec<FrameData>,
    targets: Vec<Target>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a SceneDataset, config: TrainConfig) -> Result<Self> {
        let cfg = config.model_config(data)?;
        let model = Model::init(cfg, config.seed)?;
        let adam = AdamState::new(&model.params, config.lr);
        Self::assemble(data, config, model, adam, 0)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(data: &'a SceneDataset, ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt
            .train
            .clone()
            .ok_or_else(|| DnpError::Contract("checkpoint has no training configuration".into()))?;
        let adam = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| DnpError::Contract("checkpoint has no optimizer state".into()))?;
        Self::assemble(data, config, ckpt.model, adam, ckpt.step)
    }

    fn assemble(data: &'a SceneDataset, config: TrainConfig, model: Model, adam: AdamState<f32>, step: u64) -> Result<Self> {
        if data.train.is_empty() {
            return Err(DnpError::validation("dataset", "no training frames"));
        }
        let cfg = &model.config;
        check_compatible(cfg, data)?;
        if config.lr <= 0.0 || !config.lr.is_finite() {
            return Err(DnpError::validation("learning rate", "must be positive"));
        }
        let (hf, wf) = cfg.grid();
        let spatial = grid_encoding(hf, wf, &cfg.layout());
        let frames = data
            .train
            .iter()
            .map(|&i| FrameData::from_dataset(cfg, data, i))
            .collect::<Result<Vec<_>>>()?;
        let targets = data
            .train
            .iter()
            .map(|&i| {
                let img = &data.frames[i];
                let full = if cfg.variant == Variant::A { img.data().to_vec() } else { img.to_chw() };
                let side = if cfg.variant.side_loss() {
                    Some(img.downscale(hf, wf)?.into_data())
                } else {
                    None
                };
                Ok(Target { full, side })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            model,
            adam,
            step,
            data,
            spatial,
            frames,
            targets,
        })
    }

    /// Training-frame position used at `step`: a fresh permutation of the
    /// training frames each epoch, seeded by the run seed and epoch.
    pub fn frame_at(&self, step: u64) -> usize {
        let n = self.frames.len() as u64;
        let epoch = step / n;
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
        order.shuffle(&mut rng);
        order[(step % n) as usize]
    }

    /// Loss of training frame `k` under the current parameters, without an
    /// update.
    pub fn frame_loss(&self, k: usize) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, k)?;
        Ok(g.value(loss)[0] as f64)
    }

    /// Mean loss over all training frames.
    pub fn dataset_loss(&self) -> Result<f64> {
        let losses = (0..self.frames.len())
            .into_par_iter()
            .map(|k| self.frame_loss(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn loss_graph(&self, g: &mut Graph<f32>, k: usize) -> Result<Var> {
        let cfg = &self.model.config;
        let frame = self.frames[k].input(cfg.mode);
        let t = &self.targets[k];
        loss_graph(
            cfg,
            g,
            &self.model.params,
            &frame,
            &self.spatial,
            &t.full,
            t.side.as_deref(),
            (self.config.rec_weight, self.config.side_weight),
        )
    }

    /// Forward/backward on one frame and gradient accumulation, without the
    /// optimizer update. Returns the loss.
    pub fn accumulate(&mut self, k: usize) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, k)?;
        let value = g.value(loss)[0] as f64;
        if !value.is_finite() {
            return Err(DnpError::NonFiniteLoss { step: self.step });
        }
        g.backward(loss, &mut self.model.params)?;
        Ok(value)
    }

    /// One optimization step. Returns the pre-update loss.
    pub fn step(&mut self) -> Result<f64> {
        let k = self.frame_at(self.step);
        self.model.params.zero_grads();
        let loss = self.accumulate(k)?;
        self.adam.lr = self.config.lr_at(self.step);
        adam_step(&mut self.model.params, &mut self.adam)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `config.steps`, emitting snapshots to `log` when enabled.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<Snapshot>> {
        let start = Instant::now();
        let mut snaps = Vec::new();
        let every = self.config.snapshot_every;
        let mut window = (0.0, 0u64);
        while self.step < self.config.steps {
            let lr = self.config.lr_at(self.step);
            let loss = self.step()?;
            window.0 += loss;
            window.1 += 1;
            if every > 0 && (self.step % every == 0 || self.step == self.config.steps) {
                let s = Snapshot {
                    step: self.step,
                    loss: window.0 / window.1 as f64,
                    lr,
                    elapsed_s: start.elapsed().as_secs_f64(),
                };
                window = (0.0, 0);
                if let Some(w) = log.as_deref_mut() {
                    let line = serde_json::to_string(&s).expect("snapshot serializes");
                    writeln!(w, "{line}").map_err(|e| DnpError::io("<training log>", e))?;
                }
                snaps.push(s);
            }
        }
        self.model.refresh_means()?;
        Ok(snaps)
    }

    pub fn dataset(&self) -> &SceneDataset {
        self.data
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut model = self.model.clone();
        model.refresh_means().expect("tables exist");
        model.params.clear_grads();
        Checkpoint {
            model,
            step: self.step,
            train: Some(self.config.clone()),
            optimizer: Some(self.adam.clone()),
        }
    }
}

/// Trains a fresh model and returns the final checkpoint.
pub fn train(d: &SceneDataset, cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<Checkpoint> {
    let mut t = Trainer::new(d, cfg.clone())?;
    t.run(log)?;
    Ok(t.checkpoint())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn frames(self, d: &SceneDataset) -> &[usize] {
        match self {
            Split::Train => &d.train,
            Split::HeldOut => &d.held_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    /// Mean absolute error on the 0..255 scale.
    pub l1: f64,
    pub mse: f64,
    /// Mean of per-frame PSNR (dB), each capped at 99.
    pub psnr: f64,
    /// Mean angle between oracle gaze estimates on rendered and true frames,
    /// over frames with open eyes.
    pub gaze_err: f64,
    pub ms_per_frame: f64,
}

/// Metrics of `pred` images against the dataset frames `idx`.
pub fn score(d: &SceneDataset, idx: &[usize], pred: &[Image], ms: &[f64]) -> Result<Metrics> {
    let mut l1 = 0.0;
    let mut mse = 0.0;
    let mut psnr = 0.0;
    let mut gaze = (0.0, 0usize);
    for (&i, img) in idx.iter().zip(pred) {
        let gt = &d.frames[i];
        l1 += img.l1(gt)?;
        let m = img.mse(gt)?;
        mse += m;
        psnr += psnr_from_mse(m);
        let tr = &d.tracks[i];
        if let (Some(a), Some(b)) = (estimate_gaze(&d.spec, tr, img), estimate_gaze(&d.spec, tr, gt)) {
            gaze.0 += gaze_angle_deg(a, b);
            gaze.1 += 1;
        }
    }
    let n = idx.len().max(1) as f64;
    Ok(Metrics {
        frames: idx.len(),
        l1: 255.0 * l1 / n,
        mse: mse / n,
        psnr: psnr / n,
        gaze_err: if gaze.1 > 0 { gaze.0 / gaze.1 as f64 } else { 0.0 },
        ms_per_frame: if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 },
    })
}

/// Renders every frame of `split`: train frames with their own latents,
/// held-out frames with the mean latent.
pub fn render_split(model: &Model, d: &SceneDataset, split: Split) -> Result<(Vec<Image>, Vec<f64>)> {
    check_compatible(&model.config, d)?;
    let renderer = Renderer::new(model.clone())?;
    let idx = split.frames(d);
    let out = idx
        .par_iter()
        .map(|&i| {
            let fd = FrameData::from_dataset(&model.config, d, i)?;
            let t0 = Instant::now();
            let img = renderer.render_input(&fd.input(model.config.mode))?;
            Ok((img, t0.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

pub fn evaluate(model: &Model, d: &SceneDataset, split: Split) -> Result<Metrics> {
    let (imgs, ms) = render_split(model, d, split)?;
    score(d, split.frames(d), &imgs, &ms)
}

/// Mean L1 (0..255 scale) over the pixels the mouth can cover in each frame
/// of `split`.
pub fn mouth_region_l1(model: &Model, d: &SceneDataset, split: Split) -> Result<f64> {
    let (imgs, _) = render_split(model, d, split)?;
    let idx = split.frames(d);
    let mut total = 0.0;
    for (&i, img) in idx.iter().zip(&imgs) {
        let mask = mouth_mask(&d.spec, &d.tracks[i]);
        total += img.masked_l1(&d.frames[i], &mask)?;
    }
    Ok(255.0 * total / idx.len().max(1) as f64)
}

/// Scores the per-pixel mean of the training frames as a constant predictor.
pub fn mean_frame_metrics(d: &SceneDataset, split: Split) -> Result<Metrics> {
    let mean = d.mean_train_frame();
    let idx = split.frames(d);
    let preds = vec![mean; idx.len()];
    score(d, idx, &preds, &[])
}
