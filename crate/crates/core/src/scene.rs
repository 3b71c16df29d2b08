//! Procedural portrait videos with exact pose, expression and gaze tracks.
//!
//! The face is a 2-D parametric drawing: a head ellipse moved by the rigid
//! pose, with eyes, brows, nose and mouth placed on a shallow pseudo-3-D
//! surface so yaw and pitch shift them sideways. Camera, background and
//! torso never move.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioTrack, FEATURE_DIM};
use crate::error::{DnpError, Result};
use crate::raster::{Image, PixelBox};
use crate::tensor_file;
use crate::tracks::{read_tracks, write_tracks, FrameTrack};

/// Named expression components, in conditioning order.
pub const EXPRESSIONS: [&str; 8] = [
    "jaw_open",
    "cheek_raise",
    "brow_raise",
    "blink",
    "forehead_lift",
    "brow_tilt",
    "cheek_puff",
    "eye_squint",
];

/// Value range of each expression component.
pub const EXPRESSION_RANGE: [(f64, f64); 8] = [
    (0.0, 1.0),
    (0.0, 1.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (-1.0, 1.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
];

const JAW: usize = 0;
const CHEEK_RAISE: usize = 1;
const BROW_RAISE: usize = 2;
const BLINK: usize = 3;
const FOREHEAD_LIFT: usize = 4;
const BROW_TILT: usize = 5;
const CHEEK_PUFF: usize = 6;
const SQUINT: usize = 7;

/// Supersampling factor per axis.
pub const SUPERSAMPLE: usize = 4;

/// Audio channels that carry the smoothed jaw signal.
pub const AUDIO_SIGNAL_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub sclera: [f32; 3],
    pub pupil: [f32; 3],
    pub lips: [f32; 3],
    pub mouth: [f32; 3],
    pub shirt: [f32; 3],
    pub background_top: [f32; 3],
    pub background_bottom: [f32; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            skin: [0.92, 0.72, 0.58],
            hair: [0.22, 0.13, 0.08],
            sclera: [0.97, 0.97, 0.95],
            pupil: [0.06, 0.07, 0.12],
            lips: [0.78, 0.28, 0.32],
            mouth: [0.28, 0.04, 0.07],
            shirt: [0.2, 0.45, 0.35],
            background_top: [0.04, 0.07, 0.15],
            background_bottom: [0.14, 0.2, 0.32],
        }
    }
}

/// Symmetric bounds of the six pose parameters:
/// yaw, pitch, roll (rad) then x, y translation (image fractions) and
/// relative scale change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub bounds: [f64; 6],
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            bounds: [0.4, 0.25, 0.25, 0.16, 0.08, 0.12],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundPattern {
    Gradient,
    /// Soft diagonal stripes over the gradient; `period` in image widths.
    Stripes { period: f64, strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_exp: usize,
    pub palette: Palette,
    pub pose_range: PoseRange,
    /// Symmetric gaze yaw and pitch bounds (rad).
    pub gaze_range: [f64; 2],
    pub background: BackgroundPattern,
    /// Head semi-axes as image fractions.
    pub head_size: [f64; 2],
    pub seed: u64,
}

impl SceneSpec {
    /// 64 x 64, eight expression components.
    pub fn reference(seed: u64) -> Self {
        Self::with_resolution(64, seed)
    }

    pub fn with_resolution(res: usize, seed: u64) -> Self {
        Self {
            height: res,
            width: res,
            n_exp: 8,
            palette: Palette::default(),
            pose_range: PoseRange::default(),
            gaze_range: [0.5, 0.3],
            background: BackgroundPattern::Stripes {
                period: 0.25,
                strength: 0.06,
            },
            head_size: [0.29, 0.36],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(DnpError::validation("scene spec", "resolution must be positive"));
        }
        if self.n_exp == 0 || self.n_exp > EXPRESSIONS.len() {
            return Err(DnpError::validation(
                "scene spec",
                format!("n_exp must lie in 1..={}, got {}", EXPRESSIONS.len(), self.n_exp),
            ));
        }
        let finite = self.pose_range.bounds.iter().chain(&self.gaze_range).chain(&self.head_size);
        if finite.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DnpError::validation("scene spec", "bounds must be finite and non-negative"));
        }
        if self.head_size.iter().any(|&v| v <= 1e-3) {
            return Err(DnpError::validation("scene spec", "head size must be positive"));
        }
        if self.pose_range.bounds[5] >= 0.9 {
            return Err(DnpError::validation("scene spec", "scale bound must stay below 0.9"));
        }
        if let BackgroundPattern::Stripes { period, strength } = self.background {
            if !(period > 0.0 && period.is_finite() && strength.is_finite()) {
                return Err(DnpError::validation("scene spec", "stripe period must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub spec: SceneSpec,
    pub frames: Vec<Image>,
    pub tracks: Vec<FrameTrack>,
    pub audio: Option<AudioTrack>,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Held-out frames: every tenth frame, starting at 5.
pub fn is_held_out(i: usize) -> bool {
    i % 10 == 5
}

pub fn split(t: usize) -> (Vec<usize>, Vec<usize>) {
    (0..t).partition(|&i| !is_held_out(i))
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let t = self.frames.len();
        if self.tracks.len() != t {
            return Err(DnpError::validation(
                "dataset",
                format!("{t} frames but {} track records", self.tracks.len()),
            ));
        }
        if let Some(a) = &self.audio {
            if a.frames() != t {
                return Err(DnpError::validation(
                    "dataset",
                    format!("{t} frames but {} audio rows", a.frames()),
                ));
            }
        }
        if let Some(&i) = self.train.iter().chain(&self.held_out).find(|&&i| i >= t) {
            return Err(DnpError::validation("dataset", format!("split index {i} is past the last frame")));
        }
        if !self.train.windows(2).all(|w| w[0] < w[1]) {
            return Err(DnpError::validation("dataset", "training indices must be strictly increasing"));
        }
        for (i, (img, tr)) in self.frames.iter().zip(&self.tracks).enumerate() {
            if img.height() != self.spec.height || img.width() != self.spec.width {
                return Err(DnpError::validation("dataset", format!("frame {i} has the wrong size")));
            }
            if tr.expression.len() != self.spec.n_exp {
                return Err(DnpError::validation(
                    "dataset",
                    format!("frame {i} has {} expression values, spec says {}", tr.expression.len(), self.spec.n_exp),
                ));
            }
        }
        Ok(())
    }

    /// Per-pixel mean of the training frames.
    pub fn mean_train_frame(&self) -> Image {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut acc = vec![0.0f64; h * w * 3];
        for &i in &self.train {
            for (a, &v) in acc.iter_mut().zip(self.frames[i].data()) {
                *a += v as f64;
            }
        }
        let n = self.train.len().max(1) as f64;
        Image::new(h, w, acc.iter().map(|v| (v / n) as f32).collect()).expect("sizes match")
    }
}

// ---------------------------------------------------------------------------
// Trajectories

/// Smooth zero-centred signal in `[-1, 1]`: a normalized sum of three
/// sinusoids with `lo..hi` cycles over the sequence.
fn smooth_signal(rng: &mut ChaCha8Rng, t: usize, lo: f64, hi: f64) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(lo..hi), rng.random_range(0.0..2.0 * PI), rng.random_range(0.4..1.0)))
        .collect();
    let norm: f64 = comps.iter().map(|c| c.2).sum();
    (0..t)
        .map(|i| {
            let s = i as f64 / t.max(1) as f64;
            comps.iter().map(|&(f, ph, a)| a * (2.0 * PI * f * s + ph).sin()).sum::<f64>() / norm
        })
        .collect()
}

/// Sparse train of short blinks.
fn blink_signal(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let mut centres = Vec::new();
    let mut c = rng.random_range(10.0..40.0);
    while c < t as f64 {
        centres.push(c);
        c += rng.random_range(35.0..70.0);
    }
    (0..t)
        .map(|i| {
            centres
                .iter()
                .map(|&c| (-((i as f64 - c) / 1.6).powi(2)).exp())
                .fold(0.0, f64::max)
        })
        .collect()
}

fn map_range(x: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + (x + 1.0) * 0.5 * (hi - lo)
}

fn trajectories(spec: &SceneSpec, t: usize) -> Vec<FrameTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5ce9_e000);
    let pose: Vec<Vec<f64>> = (0..6)
        .map(|k| {
            let b = spec.pose_range.bounds[k];
            smooth_signal(&mut rng, t, 1.0, 4.0).into_iter().map(|v| v * b).collect()
        })
        .collect();
    // Eye movements are an order of magnitude faster than head motion: a
    // few frames per swing.
    let gaze: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            let b = spec.gaze_range[k];
            let cycles = t as f64 / 10.0;
            smooth_signal(&mut rng, t, cycles, 2.0 * cycles).into_iter().map(|v| v * b).collect()
        })
        .collect();
    let expr: Vec<Vec<f64>> = (0..spec.n_exp)
        .map(|k| match k {
            BLINK => blink_signal(&mut rng, t),
            // Often fully shut or wide open.
            JAW => smooth_signal(&mut rng, t, 6.0, 16.0)
                .into_iter()
                .map(|v| (0.5 + 0.8 * v).clamp(0.0, 1.0))
                .collect(),
            _ => smooth_signal(&mut rng, t, 2.0, 6.0)
                .into_iter()
                .map(|v| map_range(v, EXPRESSION_RANGE[k]))
                .collect(),
        })
        .collect();
    (0..t)
        .map(|i| FrameTrack {
            pose: std::array::from_fn(|k| pose[k][i]),
            expression: expr.iter().map(|e| e[i]).collect(),
            gaze: [gaze[0][i], gaze[1][i]],
        })
        .collect()
}

/// Clamps every held-out parameter into the per-dimension range spanned by
/// the training frames.
fn clamp_held_out(tracks: &mut [FrameTrack], train: &[usize], held_out: &[usize]) {
    if train.is_empty() {
        return;
    }
    let flat = |tr: &FrameTrack| -> Vec<f64> {
        tr.pose.iter().chain(&tr.expression).chain(&tr.gaze).copied().collect()
    };
    let d = flat(&tracks[0]).len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for &i in train {
        for (k, v) in flat(&tracks[i]).into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    for &i in held_out {
        let tr = &mut tracks[i];
        let n_exp = tr.expression.len();
        let values = tr
            .pose
            .iter_mut()
            .chain(tr.expression.iter_mut())
            .chain(tr.gaze.iter_mut());
        for (k, v) in values.enumerate() {
            *v = v.clamp(lo[k], hi[k]);
        }
        debug_assert_eq!(tr.expression.len(), n_exp);
    }
}

// ---------------------------------------------------------------------------
// Geometry

/// Everything needed to shade one frame, derived from `(spec, p, e, g)`.
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    centre: [f64; 2],
    scale: f64,
    roll_cs: (f64, f64),
    yaw_cs: (f64, f64),
    pitch_cs: (f64, f64),
    /// Head semi-axes, aspect-corrected to pixel-isotropic units.
    a: f64,
    b: f64,
    puff: f64,
    expr: [f64; 8],
    gaze_sin: [f64; 2],
    aspect: f64,
}

const EYE_X: f64 = 0.36;
const EYE_Y: f64 = -0.14;
const SCLERA: [f64; 2] = [0.27, 0.15];
const PUPIL_R: f64 = 0.11;
const PUPIL_TRAVEL: [f64; 2] = [0.25, 0.12];
const FEATURE_DEPTH: f64 = 0.45;
const NOSE_DEPTH: f64 = 0.8;
const MOUTH_Y: f64 = 0.48;
const MOUTH_HALF_W: f64 = 0.38;
const CHEEK_X: f64 = 0.62;
const CHEEK_Y: f64 = 0.2;

impl FaceGeometry {
    pub fn new(spec: &SceneSpec, track: &FrameTrack) -> Self {
        let p = &track.pose;
        let mut expr = [0.0; 8];
        for (k, &v) in track.expression.iter().enumerate().take(8) {
            expr[k] = v;
        }
        let aspect = spec.width as f64 / spec.height as f64;
        Self {
            centre: [0.5 + p[3], 0.46 + p[4]],
            scale: 1.0 + p[5],
            roll_cs: (p[2].cos(), p[2].sin()),
            yaw_cs: (p[0].cos(), p[0].sin()),
            pitch_cs: (p[1].cos(), p[1].sin()),
            a: spec.head_size[0],
            b: spec.head_size[1] / aspect,
            puff: expr[CHEEK_PUFF],
            expr,
            gaze_sin: [track.gaze[0].sin(), track.gaze[1].sin()],
            aspect,
        }
    }

    /// Image point `(u, v)` in `[0,1]^2` to head-plane coordinates, in units
    /// of the head's half-width so feature constants are size-independent.
    fn to_head(&self, u: f64, v: f64) -> [f64; 2] {
        let dx = u - self.centre[0];
        let dy = (v - self.centre[1]) / self.aspect;
        let (c, s) = self.roll_cs;
        let x = (c * dx + s * dy) / (self.scale * self.a);
        let y = (-s * dx + c * dy) / (self.scale * self.a);
        [x, y]
    }

    fn from_head(&self, h: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.roll_cs;
        let x = h[0] * self.scale * self.a;
        let y = h[1] * self.scale * self.a;
        [self.centre[0] + c * x - s * y, self.centre[1] + (s * x + c * y) * self.aspect]
    }

    /// Head-plane point to the face-surface coordinates of a feature at
    /// depth `k`.
    fn to_surface(&self, h: [f64; 2], k: f64) -> [f64; 2] {
        [
            (h[0] - k * self.yaw_cs.1) / self.yaw_cs.0,
            (h[1] + k * self.pitch_cs.1) / self.pitch_cs.0,
        ]
    }

    fn from_surface(&self, f: [f64; 2], k: f64) -> [f64; 2] {
        [
            f[0] * self.yaw_cs.0 + k * self.yaw_cs.1,
            f[1] * self.pitch_cs.0 - k * self.pitch_cs.1,
        ]
    }

    fn head_semi_y(&self) -> f64 {
        self.b / self.a
    }

    /// Signed "inside" measure of the head outline (< 1 inside).
    fn head_radius(&self, h: [f64; 2]) -> f64 {
        let narrow = 1.0 - 0.3 * (1.0 - self.yaw_cs.0);
        let lower = (h[1] / self.head_semi_y()).clamp(0.0, 1.0);
        let ax = narrow * (1.0 + 0.14 * self.puff * lower);
        let x = (h[0] - 0.15 * self.yaw_cs.1) / ax;
        let y = h[1] / self.head_semi_y();
        x * x + y * y
    }

    fn eye_open(&self) -> f64 {
        ((1.0 - self.expr[BLINK]) * (1.0 - 0.45 * self.expr[SQUINT])).clamp(0.0, 1.0)
    }

    fn eye_centre(side: f64) -> [f64; 2] {
        [side * EYE_X, EYE_Y]
    }

    fn pupil_offset(&self) -> [f64; 2] {
        [PUPIL_TRAVEL[0] * self.gaze_sin[0], -PUPIL_TRAVEL[1] * self.gaze_sin[1]]
    }

    /// Inside test for the sclera of the eye on `side` in surface coordinates.
    fn in_sclera(&self, f: [f64; 2], side: f64) -> bool {
        let c = Self::eye_centre(side);
        let open = self.eye_open();
        if open < 1e-3 {
            return false;
        }
        let x = (f[0] - c[0]) / SCLERA[0];
        let y = (f[1] - c[1]) / (SCLERA[1] * open);
        x * x + y * y <= 1.0
    }

    fn in_pupil(&self, f: [f64; 2], side: f64) -> bool {
        let c = Self::eye_centre(side);
        let o = self.pupil_offset();
        let x = f[0] - c[0] - o[0];
        let y = f[1] - c[1] - o[1];
        x * x + y * y <= PUPIL_R * PUPIL_R
    }

    fn in_brow(&self, f: [f64; 2], side: f64) -> bool {
        let cx = side * EYE_X;
        let cy = EYE_Y - 0.3 - 0.1 * self.expr[BROW_RAISE];
        let angle = side * 0.25 * self.expr[BROW_TILT];
        let (c, s) = (angle.cos(), angle.sin());
        let dx = f[0] - cx;
        let dy = f[1] - cy;
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy + 0.25 * (along / 0.3).powi(2) * 0.2;
        along.abs() <= 0.3 && across.abs() <= 0.06
    }

    /// 0 outside the mouth, 1 on the lips, 2 inside the opening.
    fn mouth_region(&self, f: [f64; 2]) -> u8 {
        let t = f[0] / MOUTH_HALF_W;
        if t.abs() >= 1.0 {
            return 0;
        }
        let profile = (1.0 - t * t).sqrt();
        let (up, down) = mouth_opening(self.expr[JAW]);
        let lip = 0.07 * profile.sqrt();
        let d = f[1] - MOUTH_Y;
        let open = if d < 0.0 { up * profile } else { down * profile };
        if d.abs() <= open {
            2
        } else if d.abs() <= open + lip {
            1
        } else {
            0
        }
    }

    /// Blush patches that grow as the cheeks rise.
    fn in_cheek(&self, f: [f64; 2]) -> bool {
        let r = 0.06 + 0.1 * self.expr[CHEEK_RAISE];
        let y = CHEEK_Y - 0.05 * self.expr[CHEEK_RAISE];
        let dx = f[0].abs() - CHEEK_X;
        dx * dx + (f[1] - y).powi(2) <= r * r
    }

    fn in_nose(&self, f: [f64; 2]) -> bool {
        let x = f[0] / 0.11;
        let y = (f[1] - 0.16) / 0.2;
        x * x + y * y <= 1.0
    }

    fn in_hair(&self, h: [f64; 2]) -> bool {
        let ys = self.head_semi_y();
        h[1] < -0.55 * ys - 0.08 * self.expr[FOREHEAD_LIFT] + 0.25 * (h[0] - 0.1 * self.yaw_cs.1).powi(2)
    }

    /// Colour of the head at head-plane point `h`, or `None` outside it.
    fn head_colour(&self, h: [f64; 2], pal: &Palette) -> Option<[f32; 3]> {
        let r = self.head_radius(h);
        if r > 1.0 {
            return None;
        }
        if self.in_hair(h) {
            return Some(pal.hair);
        }
        let shade = (1.0 - 0.22 * (h[0] + 0.6 * self.yaw_cs.1).powi(2) - 0.1 * r) as f32;
        let skin = pal.skin.map(|c| c * shade);
        let f = self.to_surface(h, FEATURE_DEPTH);
        for side in [-1.0, 1.0] {
            if self.in_brow(f, side) {
                return Some(pal.hair);
            }
            if self.in_sclera(f, side) {
                return Some(if self.in_pupil(f, side) { pal.pupil } else { pal.sclera });
            }
        }
        match self.mouth_region(f) {
            2 => return Some(pal.mouth),
            1 => return Some(pal.lips),
            _ => {}
        }
        if self.in_cheek(f) {
            return Some(std::array::from_fn(|k| 0.72 * skin[k] + 0.2 * pal.lips[k]));
        }
        let fn_ = self.to_surface(h, NOSE_DEPTH);
        if self.in_nose(fn_) {
            return Some(skin.map(|c| c * 0.82));
        }
        Some(skin)
    }

    /// Axis-aligned image-space bounds of a surface-space box, as a pixel box
    /// grown by one pixel and clipped to the image.
    fn surface_box(&self, spec: &SceneSpec, centre: [f64; 2], half: [f64; 2], depth: f64) -> PixelBox {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                let f = [centre[0] + sx * half[0], centre[1] + sy * half[1]];
                let p = self.from_head(self.from_surface(f, depth));
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        let (w, h) = (spec.width, spec.height);
        PixelBox {
            x0: clip((lo[0] * w as f64).floor() - 1.0, w),
            x1: clip((hi[0] * w as f64).ceil() + 1.0, w),
            y0: clip((lo[1] * h as f64).floor() - 1.0, h),
            y1: clip((hi[1] * h as f64).ceil() + 1.0, h),
        }
    }
}

fn background(spec: &SceneSpec, u: f64, v: f64) -> [f32; 3] {
    let pal = &spec.palette;
    let t = v as f32;
    let mut c: [f32; 3] = std::array::from_fn(|k| pal.background_top[k] * (1.0 - t) + pal.background_bottom[k] * t);
    if let BackgroundPattern::Stripes { period, strength } = spec.background {
        let s = (strength * (2.0 * PI * (u + 0.6 * v) / period).sin()) as f32;
        c = c.map(|x| x + s);
    }
    // Static torso and neck.
    let (tx, ty) = ((u - 0.5) / 0.36, (v - 1.08) / 0.3);
    if tx * tx + ty * ty <= 1.0 {
        return pal.shirt;
    }
    if (u - 0.5).abs() <= 0.075 && (0.6..=0.95).contains(&v) {
        return pal.skin.map(|x| x * 0.78);
    }
    c
}

/// Colour of one sample point.
fn shade(spec: &SceneSpec, geo: &FaceGeometry, u: f64, v: f64) -> [f32; 3] {
    match geo.head_colour(geo.to_head(u, v), &spec.palette) {
        Some(c) => c,
        None => background(spec, u, v),
    }
}

fn supersampled<F: Fn(f64, f64) -> [f32; 3]>(spec: &SceneSpec, f: F) -> Image {
    let (h, w) = (spec.height, spec.width);
    let n = SUPERSAMPLE;
    let norm = 1.0 / (n * n) as f32;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for sy in 0..n {
                for sx in 0..n {
                    let u = (x as f64 + (sx as f64 + 0.5) / n as f64) / w as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / n as f64) / h as f64;
                    let c = f(u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            data.extend(acc.map(|a| (a * norm).clamp(0.0, 1.0)));
        }
    }
    Image::new(h, w, data).expect("sizes match")
}

/// Renders a single frame from its parameters.
pub fn render_frame(spec: &SceneSpec, track: &FrameTrack) -> Result<Image> {
    spec.validate()?;
    check_track(spec, track)?;
    let geo = FaceGeometry::new(spec, track);
    Ok(supersampled(spec, |u, v| shade(spec, &geo, u, v)))
}

fn check_track(spec: &SceneSpec, track: &FrameTrack) -> Result<()> {
    if track.expression.len() != spec.n_exp {
        return Err(DnpError::validation(
            "track",
            format!("{} expression values, scene has {}", track.expression.len(), spec.n_exp),
        ));
    }
    if !track.pose.iter().chain(&track.expression).chain(&track.gaze).all(|v| v.is_finite()) {
        return Err(DnpError::validation("track", "non-finite parameter"));
    }
    Ok(())
}

/// Generates `t` frames with smooth random trajectories.
pub fn generate_scene(spec: &SceneSpec, t: usize) -> Result<SceneDataset> {
    spec.validate()?;
    if t < 2 {
        return Err(DnpError::validation("frame count", format!("need at least 2 frames, got {t}")));
    }
    let mut tracks = trajectories(spec, t);
    let (train, held_out) = split(t);
    clamp_held_out(&mut tracks, &train, &held_out);
    let frames = tracks
        .par_iter()
        .map(|tr| render_frame(spec, tr))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneDataset {
        spec: spec.clone(),
        frames,
        tracks,
        audio: None,
        train,
        held_out,
    })
}

// ---------------------------------------------------------------------------
// Oracles

/// Pixel boxes enclosing each eye (sclera and pupil) for one frame.
pub fn eye_boxes(spec: &SceneSpec, track: &FrameTrack) -> [PixelBox; 2] {
    let geo = FaceGeometry::new(spec, track);
    [-1.0, 1.0].map(|side| geo.surface_box(spec, FaceGeometry::eye_centre(side), SCLERA, FEATURE_DEPTH))
}

/// Extent of the mouth opening above and below the lip line: the jaw mostly
/// drops the lower lip.
fn mouth_opening(jaw: f64) -> (f64, f64) {
    (0.02 + 0.05 * jaw, 0.02 + 0.42 * jaw)
}

/// Pixel box enclosing the mouth and lips for one frame.
pub fn mouth_box(spec: &SceneSpec, track: &FrameTrack) -> PixelBox {
    let geo = FaceGeometry::new(spec, track);
    let (up, down) = mouth_opening(geo.expr[JAW].max(0.0));
    let centre = MOUTH_Y + 0.5 * (down - up);
    geo.surface_box(spec, [0.0, centre], [MOUTH_HALF_W, 0.5 * (up + down) + 0.07], FEATURE_DEPTH)
}

/// Pixels the mouth (lips or opening) can cover in this frame's pose: the
/// mouth at full jaw opening, which contains the mouth at every smaller one.
pub fn mouth_mask(spec: &SceneSpec, track: &FrameTrack) -> Vec<bool> {
    let mut open = track.clone();
    if let Some(j) = open.expression.get_mut(JAW) {
        *j = EXPRESSION_RANGE[JAW].1;
    }
    let geo = FaceGeometry::new(spec, &open);
    let img = supersampled(spec, |u, v| {
        let h = geo.to_head(u, v);
        let inside = geo.head_radius(h) <= 1.0 && geo.mouth_region(geo.to_surface(h, FEATURE_DEPTH)) > 0;
        [inside as u8 as f32; 3]
    });
    img.data().chunks_exact(3).map(|c| c[0] > 0.0).collect()
}

/// Fraction of each pixel's samples that fall on the head.
pub fn head_coverage(spec: &SceneSpec, track: &FrameTrack) -> Vec<f32> {
    let geo = FaceGeometry::new(spec, track);
    let img = supersampled(spec, |u, v| {
        let inside = geo.head_radius(geo.to_head(u, v)) <= 1.0;
        [inside as u8 as f32; 3]
    });
    img.data().chunks_exact(3).map(|c| c[0]).collect()
}

/// Estimates gaze angles from the pupil position in `img`, given the frame's
/// head pose and eye openness. Returns `None` when the eyes are closed.
pub fn estimate_gaze(spec: &SceneSpec, track: &FrameTrack, img: &Image) -> Option<[f64; 2]> {
    let geo = FaceGeometry::new(spec, track);
    if geo.eye_open() < 0.35 {
        return None;
    }
    let (h, w) = (spec.height, spec.width);
    let mut offsets = Vec::new();
    for side in [-1.0, 1.0] {
        let bx = geo.surface_box(spec, FaceGeometry::eye_centre(side), SCLERA, FEATURE_DEPTH);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in bx.y0..bx.y1 {
            for x in bx.x0..bx.x1 {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                let f = geo.to_surface(geo.to_head(u, v), FEATURE_DEPTH);
                let c = FaceGeometry::eye_centre(side);
                let open = geo.eye_open();
                let ex = (f[0] - c[0]) / (SCLERA[0] * 0.9);
                let ey = (f[1] - c[1]) / (SCLERA[1] * open * 0.9);
                if ex * ex + ey * ey > 1.0 {
                    continue;
                }
                let p = img.pixel(y, x);
                let lum = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                let wgt = (0.85 - lum).max(0.0);
                sw += wgt;
                sx += wgt * f[0];
                sy += wgt * f[1];
            }
        }
        if sw > 1e-6 {
            let c = FaceGeometry::eye_centre(side);
            offsets.push([sx / sw - c[0], sy / sw - c[1]]);
        }
    }
    if offsets.is_empty() {
        return Some([0.0, 0.0]);
    }
    let n = offsets.len() as f64;
    let dx = offsets.iter().map(|o| o[0]).sum::<f64>() / n;
    let dy = offsets.iter().map(|o| o[1]).sum::<f64>() / n;
    let yaw = (dx / PUPIL_TRAVEL[0]).clamp(-1.0, 1.0).asin();
    let pitch = (-dy / PUPIL_TRAVEL[1]).clamp(-1.0, 1.0).asin();
    Some([yaw, pitch])
}

/// Unit gaze direction for yaw/pitch angles.
pub fn gaze_vector(g: [f64; 2]) -> [f64; 3] {
    let (cy, sy) = (g[0].cos(), g[0].sin());
    let (cp, sp) = (g[1].cos(), g[1].sin());
    [cp * sy, sp, cp * cy]
}

/// Angle between two gaze directions, in degrees.
pub fn gaze_angle_deg(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (va, vb) = (gaze_vector(a), gaze_vector(b));
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let cross = [
        va[1] * vb[2] - va[2] * vb[1],
        va[2] * vb[0] - va[0] * vb[2],
        va[0] * vb[1] - va[1] * vb[0],
    ];
    let sin = cross.iter().map(|c| c * c).sum::<f64>().sqrt();
    sin.atan2(dot).to_degrees()
}

// ---------------------------------------------------------------------------
// Audio

fn smooth3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let prev = x[i.saturating_sub(1)];
            let next = x[(i + 1).min(n - 1)];
            0.25 * prev + 0.5 * x[i] + 0.25 * next
        })
        .collect()
}

/// Audio features coupled to the jaw trajectory: the first
/// [`AUDIO_SIGNAL_CHANNELS`] channels are affine images of the smoothed jaw
/// signal, the rest are noise seeded by the scene seed alone.
pub fn synth_audio_track(d: &SceneDataset) -> Result<AudioTrack> {
    if d.spec.n_exp <= JAW || d.tracks.is_empty() {
        return Err(DnpError::Contract("scene has no jaw_open expression component".into()));
    }
    let jaw: Vec<f64> = d.tracks.iter().map(|t| t.expression[JAW]).collect();
    let sm = smooth3(&jaw);
    let t = jaw.len();
    let mut rng = ChaCha8Rng::seed_from_u64(d.spec.seed ^ 0xa0d1_0000);
    let gains: Vec<(f64, f64)> = (0..AUDIO_SIGNAL_CHANNELS)
        .map(|k| (if k % 2 == 0 { 1.0 } else { -1.0 } * (1.5 + 0.5 * k as f64), 0.3 * k as f64 - 0.6))
        .collect();
    let mut data = vec![0.0f32; t * FEATURE_DIM];
    for c in AUDIO_SIGNAL_CHANNELS..FEATURE_DIM {
        for i in 0..t {
            data[i * FEATURE_DIM + c] = rng.random_range(-1.0f32..1.0);
        }
    }
    for i in 0..t {
        for (k, &(a, b)) in gains.iter().enumerate() {
            data[i * FEATURE_DIM + k] = (a * sm[i] + b) as f32;
        }
    }
    AudioTrack::new(Tensor::from_vec(&[t, FEATURE_DIM], data)?)
}

/// Pearson correlation of two equally long series.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
struct SpecFile {
    spec: SceneSpec,
    frames: usize,
    has_audio: bool,
}

pub fn save_dataset(d: &SceneDataset, dir: &Path) -> Result<()> {
    d.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| DnpError::io(&frames_dir, e))?;
    d.frames
        .par_iter()
        .enumerate()
        .try_for_each(|(i, img)| img.save_png(&frames_dir.join(format!("{i:06}.png"))))?;
    let tracks = dir.join("tracks.jsonl");
    let file = fs::File::create(&tracks).map_err(|e| DnpError::io(&tracks, e))?;
    write_tracks(std::io::BufWriter::new(file), &d.tracks).map_err(|e| DnpError::io(&tracks, e))?;
    let audio = dir.join("audio.bin");
    match &d.audio {
        Some(a) => tensor_file::save(&audio, a.tensor())?,
        None if audio.exists() => fs::remove_file(&audio).map_err(|e| DnpError::io(&audio, e))?,
        None => {}
    }
    let spec_path = dir.join("spec.json");
    let spec = SpecFile {
        spec: d.spec.clone(),
        frames: d.len(),
        has_audio: d.audio.is_some(),
    };
    let json = serde_json::to_string_pretty(&spec).expect("spec serializes");
    fs::write(&spec_path, json + "\n").map_err(|e| DnpError::io(&spec_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| DnpError::io(&spec_path, e))?;
    let sf: SpecFile = serde_json::from_str(&text).map_err(|e| DnpError::format(&spec_path, e.to_string()))?;
    let tracks_path = dir.join("tracks.jsonl");
    let file = fs::File::open(&tracks_path).map_err(|e| DnpError::io(&tracks_path, e))?;
    let tracks = read_tracks(std::io::BufReader::new(file)).map_err(|e| DnpError::format(&tracks_path, e.to_string()))?;
    if tracks.len() != sf.frames {
        return Err(DnpError::format(
            &tracks_path,
            format!("{} records, spec.json says {}", tracks.len(), sf.frames),
        ));
    }
    let frames_dir = dir.join("frames");
    let frames = (0..sf.frames)
        .into_par_iter()
        .map(|i| Image::load_png(&frames_dir.join(format!("{i:06}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let audio = if sf.has_audio {
        let path = dir.join("audio.bin");
        Some(AudioTrack::new(tensor_file::load(&path)?).map_err(|e| DnpError::format(&path, e.to_string()))?)
    } else {
        None
    };
    let (train, held_out) = split(sf.frames);
    let d = SceneDataset {
        spec: sf.spec,
        frames,
        tracks,
        audio,
        train,
        held_out,
    };
    d.validate().map_err(|e| DnpError::format(dir, e.to_string()))?;
    Ok(d)
}
