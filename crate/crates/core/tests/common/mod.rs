#![allow(dead_code)]

use dnp::model::{DriveMode, Preset, Variant};
use dnp::scene::{generate_scene, synth_audio_track, SceneDataset, SceneSpec};
use dnp::training::TrainConfig;

/// 16 x 16, 30 frames, with audio.
pub fn small_scene(seed: u64) -> SceneDataset {
    let mut d = generate_scene(&SceneSpec::with_resolution(16, seed), 30).unwrap();
    d.audio = Some(synth_audio_track(&d).unwrap());
    d
}

pub fn tiny_config(variant: Variant, steps: u64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(variant, steps, seed);
    c.preset = Preset::Tiny;
    c.n_v = 8;
    c
}

pub fn tiny_audio_config(steps: u64, seed: u64) -> TrainConfig {
    let mut c = tiny_config(Variant::F, steps, seed);
    c.mode = DriveMode::Audio;
    c
}
