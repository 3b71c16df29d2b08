//! Forward-pass latency measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DnpError, Result};
use crate::field::LatentInput;
use crate::model::{DriveMode, DriveSource, FrameInput, Model};
use crate::render::Renderer;

pub const WARMUP_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub resolution: usize,
    pub frames: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: String,
    pub threads: usize,
    pub warmup: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn entry(&self, resolution: usize) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.resolution == resolution)
    }
}

/// Summary statistics of a list of timings (ms).
pub fn summarize(resolution: usize, mut ms: Vec<f64>) -> BenchEntry {
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let mean = ms.iter().sum::<f64>() / n.max(1) as f64;
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        ms[n / 2]
    } else {
        0.5 * (ms[n / 2 - 1] + ms[n / 2])
    };
    let p95 = if n == 0 { 0.0 } else { ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1] };
    BenchEntry {
        resolution,
        frames: n,
        mean_ms: mean,
        median_ms: median,
        p95_ms: p95,
    }
}

/// Times `trials` forward passes per square resolution after
/// [`WARMUP_FRAMES`] untimed ones. The conditioning row is encoded once
/// beforehand, so only the field and decoder are measured.
pub fn benchmark(model: &Model, resolutions: &[usize], trials: usize) -> Result<BenchReport> {
    if trials == 0 {
        return Err(DnpError::validation("trials", "must be positive"));
    }
    let cfg = &model.config;
    for &r in resolutions {
        cfg.grid_for(r, r)?;
    }
    let renderer = Renderer::new(model.clone())?;
    let drive: Vec<f64> = vec![0.0; cfg.drive_len()];
    let frame = FrameInput {
        pose: [0.0; 6],
        gaze: [0.0; 2],
        drive: match cfg.mode {
            DriveMode::Expression => DriveSource::Expression(&drive),
            DriveMode::Audio => DriveSource::AudioCode(&drive),
        },
        latent: LatentInput::Mean,
    };
    let row = renderer.conditioning(&frame)?;
    let mut entries = Vec::new();
    for &r in resolutions {
        renderer.spatial_for(r, r)?;
        for _ in 0..WARMUP_FRAMES {
            renderer.render_row(&row, r, r)?;
        }
        let mut ms = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t0 = Instant::now();
            let img = renderer.render_row(&row, r, r)?;
            ms.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(img);
        }
        entries.push(summarize(r, ms));
    }
    Ok(BenchReport {
        variant: cfg.variant.name().to_string(),
        threads: rayon::current_num_threads(),
        warmup: WARMUP_FRAMES,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let e = summarize(64, (1..=100).map(f64::from).collect());
        assert_eq!(e.frames, 100);
        assert!((e.mean_ms - 50.5).abs() < 1e-12);
        assert!((e.median_ms - 50.5).abs() < 1e-12);
        assert_eq!(e.p95_ms, 95.0);
    }
}
