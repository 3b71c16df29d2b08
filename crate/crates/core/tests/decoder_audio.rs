use dnp::audio::{AudioConfig, AudioNet, AudioTrack, AudioWindow, FEATURE_DIM, MIX_LEN, WINDOW};
use dnp::decoder::{Decoder, DecoderConfig};
use dnp::field::{FieldConfig, FieldMlp};
use dnp::encoding::{ConditioningLayout, EncodingConfig};
use dnp::field::grid_encoding;
use dnp::numcore::{grad_check, GradCheckOptions, Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero_all(params: &mut ParamSet<f32>, prefix: &str) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.name(id).starts_with(prefix) {
            params.get_mut(id).data_mut().fill(0.0);
        }
    }
}

fn decoder(stages: usize, n_f: usize, seed: u64) -> (Decoder, ParamSet<f32>) {
    let d = Decoder::new(DecoderConfig::new(stages, n_f)).unwrap();
    let mut p = ParamSet::new();
    d.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
    (d, p)
}

#[test]
fn zero_decoder_is_half_grey_at_eight_times_the_grid() {
    let (d, mut p) = decoder(3, 8, 1);
    zero_all(&mut p, "decoder");
    let f = Tensor::randn(&[8, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let img = d.decode(&p, &f).unwrap();
    assert_eq!(img.shape(), &[3, 64, 64]);
    assert!(img.data().iter().all(|&v| v == 0.5));
}

#[test]
fn output_shape_follows_stage_count() {
    for stages in 0..4 {
        let (d, p) = decoder(stages, 4, 3);
        let f = Tensor::randn(&[4, 3, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(stages as u64));
        let img = d.decode(&p, &f).unwrap();
        let s = 1 << stages;
        assert_eq!(img.shape(), &[3, 3 * s, 5 * s]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let (d, p) = decoder(2, 4, 3);
    assert!(d.decode(&p, &Tensor::zeros(&[5, 4, 4])).is_err());
}

#[test]
fn decoder_is_translation_covariant_in_the_interior() {
    let (stages, n_f, hf, wf) = (2usize, 8usize, 6usize, 12usize);
    let (d, p) = decoder(stages, n_f, 4);
    let f = Tensor::<f32>::randn(&[n_f, hf, wf], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let mut shifted = vec![0.0f32; n_f * hf * wf];
    for c in 0..n_f {
        for i in 0..hf {
            for j in 1..wf {
                shifted[(c * hf + i) * wf + j] = f.data()[(c * hf + i) * wf + j - 1];
            }
        }
    }
    let shifted = Tensor::from_vec(&[n_f, hf, wf], shifted).unwrap();
    let a = d.decode(&p, &f).unwrap();
    let b = d.decode(&p, &shifted).unwrap();
    let s = 1 << stages;
    let (h, w) = (hf * s, wf * s);
    // Each 3x3 convolution sees one pixel of its own resolution on either side.
    let margin = 2 * s;
    for c in 0..3 {
        for y in margin..h - margin {
            for x in margin + s..w - margin {
                let va = a.data()[(c * h + y) * w + x - s];
                let vb = b.data()[(c * h + y) * w + x];
                assert!((va - vb).abs() <= 1e-5, "({c},{y},{x}): {va} vs {vb}");
            }
        }
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (d, p) = decoder(1, 2, 6);
    let mut p: ParamSet<f64> = p.cast();
    p.insert("input", Tensor::randn(&[2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8)).with_requires_grad(true));
    let target = Tensor::<f64>::uniform(&[3 * 64], 0.5, &mut ChaCha8Rng::seed_from_u64(9));
    let f = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        let x = g.param(p, p.id("input")?);
        let y = d.forward(g, p, x).map_err(|e| dnp::numcore::NumError::contract("decode", e.to_string()))?;
        let y = g.reshape(y, &[3 * 64])?;
        let t = g.constant(&[3 * 64], target.data().to_vec())?;
        g.mse(y, t)
    };
    let r = grad_check(f, &mut p, &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-3, "{:?}", r.worst());
}

#[test]
fn joint_backward_reaches_the_field() {
    let layout = ConditioningLayout {
        encoding: EncodingConfig { n_x: 4, n_p: 2, n_g: 2 },
        n_e: 3,
        use_gaze: false,
        n_v: 0,
    };
    let cfg = FieldConfig { depth: 2, width: 16, skip_at: None, n_f: 4, feature_head: true };
    let mlp = FieldMlp::new(cfg, layout).unwrap();
    let dec = Decoder::new(DecoderConfig::new(2, 4)).unwrap();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    mlp.init(&mut params, &mut rng);
    dec.init(&mut params, &mut rng);
    let mut g = Graph::new();
    let s = g.input(&grid_encoding::<f32>(4, 4, &layout), false);
    let c = g.constant(&[1, layout.nonspatial_len()], vec![0.1; layout.nonspatial_len()]).unwrap();
    let out = mlp.forward(&mut g, &params, s, c).unwrap();
    let feat = g.transpose(out.features.unwrap()).unwrap();
    let feat = g.reshape(feat, &[4, 4, 4]).unwrap();
    let img = dec.forward(&mut g, &params, feat).unwrap();
    let loss = g.mean(img);
    g.backward(loss, &mut params).unwrap();
    for (_, name, t) in params.iter() {
        if name.starts_with("field.l") && name.ends_with(".w_x") {
            let norm: f32 = t.grad().unwrap().iter().map(|v| v.abs()).sum();
            assert!(norm > 0.0, "{name} received no gradient");
        }
    }
}

fn ramp_track(t: usize) -> AudioTrack {
    let data = (0..t * FEATURE_DIM).map(|v| (v / FEATURE_DIM) as f32).collect();
    AudioTrack::new(Tensor::from_vec(&[t, FEATURE_DIM], data).unwrap()).unwrap()
}

fn row_ids(w: &AudioWindow) -> Vec<usize> {
    w.data.chunks_exact(FEATURE_DIM).map(|r| r[0] as usize).collect()
}

#[test]
fn centred_and_edge_windows() {
    let tr = ramp_track(100);
    assert_eq!(row_ids(&tr.window(50).unwrap()), (42..58).collect::<Vec<_>>());
    let mut edge = vec![0; 8];
    edge.extend(0..8);
    assert_eq!(row_ids(&tr.window(0).unwrap()), edge);
    assert!(tr.window(100).unwrap_err().is_validation());
}

#[test]
fn constant_track_gives_constant_windows_and_one_window_per_frame() {
    let tr = AudioTrack::new(Tensor::from_vec(&[12, FEATURE_DIM], vec![0.25; 12 * FEATURE_DIM]).unwrap()).unwrap();
    let windows: Vec<_> = (0..tr.frames()).map(|i| tr.window(i).unwrap()).collect();
    assert_eq!(windows.len(), 12);
    assert!(windows.iter().all(|w| w.data.len() == WINDOW * FEATURE_DIM && w.data.iter().all(|&v| v == 0.25)));
}

fn audio_net(seed: u64) -> (AudioNet, ParamSet<f32>) {
    let net = AudioNet::new(AudioConfig::default()).unwrap();
    let mut p = ParamSet::new();
    net.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
    (net, p)
}

#[test]
fn zero_encoder_gives_zero_code() {
    let (net, mut p) = audio_net(1);
    zero_all(&mut p, "audio.");
    let w = ramp_track(30).window(10).unwrap();
    let a = net.audio_encode(&p, &w).unwrap();
    assert_eq!(a.len(), 32);
    assert!(a.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_score_net_averages_codes() {
    let (net, mut p) = audio_net(2);
    zero_all(&mut p, "audio.att");
    let codes = Tensor::<f32>::randn(&[MIX_LEN, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let (alpha, w) = net.attention_mix(&p, &codes).unwrap();
    assert!(w.iter().all(|&v| (v - 0.125).abs() < 1e-7));
    for k in 0..32 {
        let mean: f32 = (0..MIX_LEN).map(|r| codes.data()[r * 32 + k]).sum::<f32>() / MIX_LEN as f32;
        assert!((alpha[k] - mean).abs() < 1e-5);
    }
}

#[test]
fn identical_codes_pass_through() {
    let (net, p) = audio_net(4);
    let row: Vec<f32> = (0..32).map(|k| (k as f32 * 0.37).sin()).collect();
    let codes = Tensor::from_vec(&[MIX_LEN, 32], row.repeat(MIX_LEN)).unwrap();
    let (alpha, _) = net.attention_mix(&p, &codes).unwrap();
    for (a, b) in alpha.iter().zip(&row) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn wrong_code_count_is_a_contract_error() {
    let (net, p) = audio_net(5);
    let codes = Tensor::zeros(&[MIX_LEN - 1, 32]);
    assert!(net.attention_mix(&p, &codes).unwrap_err().is_validation());
}

#[test]
fn encoder_is_not_time_symmetric() {
    let (net, p) = audio_net(6);
    let tr = AudioTrack::new(Tensor::randn(&[40, FEATURE_DIM], 1.0, &mut ChaCha8Rng::seed_from_u64(7))).unwrap();
    let w = tr.window(20).unwrap();
    let a = net.audio_encode(&p, &w).unwrap();
    let b = net.audio_encode(&p, &w.reversed()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn audio_pathway_gradients_match_finite_differences() {
    let net = AudioNet::new(AudioConfig::tiny()).unwrap();
    let mut p32 = ParamSet::new();
    net.init(&mut p32, &mut ChaCha8Rng::seed_from_u64(11));
    let mut p: ParamSet<f64> = p32.cast();
    let tr = AudioTrack::new(Tensor::randn(&[20, FEATURE_DIM], 1.0, &mut ChaCha8Rng::seed_from_u64(12))).unwrap();
    let windows = tr.mix_windows(9).unwrap();
    let probe: Vec<f64> = (0..8).map(|k| (k as f64 * 0.9).cos()).collect();
    let f = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        let alpha = net
            .condition(g, p, &windows)
            .map_err(|e| dnp::numcore::NumError::contract("audio", e.to_string()))?;
        let t = g.constant(&[1, 8], probe.clone())?;
        let m = g.mul(alpha, t)?;
        let sq = g.mul(m, m)?;
        Ok(g.sum(sq))
    };
    let r = grad_check(f, &mut p, &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-3, "{:?}", r.worst());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_is_a_convex_combination(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let (net, p) = audio_net(seed);
        let codes = Tensor::<f32>::randn(&[MIX_LEN, 32], scale, &mut ChaCha8Rng::seed_from_u64(seed ^ 77));
        let (alpha, w) = net.attention_mix(&p, &codes).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        let total: f64 = w.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        for k in 0..32 {
            let col: Vec<f32> = (0..MIX_LEN).map(|r| codes.data()[r * 32 + k]).collect();
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let tol = 1e-5 * (1.0 + hi.abs().max(lo.abs()));
            prop_assert!(alpha[k] >= lo - tol && alpha[k] <= hi + tol);
        }
    }

    #[test]
    fn windows_are_pure_and_clamped(t in 1usize..40, i in 0usize..40) {
        let tr = ramp_track(t);
        let i = i % t;
        let ids = row_ids(&tr.window(i).unwrap());
        for (k, &r) in ids.iter().enumerate() {
            let want = (i as isize + k as isize - 8).clamp(0, t as isize - 1) as usize;
            prop_assert_eq!(r, want);
        }
        prop_assert_eq!(tr.window(i).unwrap(), tr.window(i).unwrap());
    }
}
