use std::f64::consts::PI;

use dnp::encoding::{encode_conditioning, encoded_len, positional_encode, ConditioningLayout, EncodingConfig};
use dnp::field::{grid_encoding, FieldConfig, FieldMlp};
use dnp::numcore::{Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn closed_form(x: f64, n: usize) -> Vec<f64> {
    let mut v = vec![x];
    let mut f = PI;
    for _ in 0..n {
        v.push((f * x).sin());
        v.push((f * x).cos());
        f *= 2.0;
    }
    v
}

#[test]
fn encode_matches_closed_form_on_seeded_scalars() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x: f64 = rng.random_range(-2.0..2.0);
        let n = rng.random_range(0..=10);
        let got = positional_encode(x, n);
        let want = closed_form(x, n);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "x={x} n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn encoded_length_is_two_n_plus_one() {
    for n in [0, 1, 4, 10] {
        assert_eq!(positional_encode(0.3, n).len(), 2 * n + 1);
        assert_eq!(encoded_len(n), 2 * n + 1);
    }
}

#[test]
fn small_hand_cases() {
    assert_eq!(positional_encode(0.0, 2), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    let h = positional_encode(0.5, 1);
    assert_eq!(h[0], 0.5);
    assert_eq!(h[1], 1.0);
    assert!(h[2].abs() < 1e-15);
}

#[test]
fn conditioning_vector_layout() {
    let cfg = EncodingConfig { n_x: 10, n_p: 4, n_g: 4 };
    let v = encode_conditioning([0.0; 2], &[0.0; 6], &[0.0; 2], &[0.0; 8], &[0.0; 32], &cfg, 8, 32).unwrap();
    assert_eq!(v.len(), 154);
    let zero_block = |n: usize| closed_form(0.0, n);
    let mut want = Vec::new();
    for _ in 0..2 {
        want.extend(zero_block(10));
    }
    for _ in 0..8 {
        want.extend(zero_block(4));
    }
    want.extend([0.0; 40]);
    assert_eq!(v, want);
}

proptest! {
    #[test]
    fn entries_bounded_for_unit_inputs(x in -1.0f64..=1.0, n in 0usize..12) {
        for v in positional_encode(x, n) {
            prop_assert!(v.abs() <= x.abs().max(1.0) + 1e-15);
        }
    }

    #[test]
    fn expression_permutation_moves_only_its_slice(
        e in proptest::collection::vec(-1.0f64..1.0, 8),
        shift in 1usize..8,
    ) {
        let cfg = EncodingConfig::default();
        let pose = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
        let gaze = [0.2, -0.3];
        let v = [0.25; 4];
        let mut rotated = e.clone();
        rotated.rotate_left(shift);
        let a = encode_conditioning([0.3, 0.7], &pose, &gaze, &e, &v, &cfg, 8, 4).unwrap();
        let b = encode_conditioning([0.3, 0.7], &pose, &gaze, &rotated, &v, &cfg, 8, 4).unwrap();
        let start = 2 * 21 + 8 * 9;
        prop_assert_eq!(&a[..start], &b[..start]);
        prop_assert_eq!(&a[start + 8..], &b[start + 8..]);
        prop_assert_eq!(&b[start..start + 8], rotated.as_slice());
    }

    #[test]
    fn length_is_a_function_of_config(nx in 0usize..12, np in 0usize..6, ng in 0usize..6, ne in 0usize..10, nv in 0usize..10) {
        let cfg = EncodingConfig { n_x: nx, n_p: np, n_g: ng };
        let v = encode_conditioning([0.5; 2], &[0.0; 6], &[0.0; 2], &vec![0.0; ne], &vec![0.0; nv], &cfg, ne, nv).unwrap();
        prop_assert_eq!(v.len(), 2 * (2 * nx + 1) + 6 * (2 * np + 1) + 2 * (2 * ng + 1) + ne + nv);
        let layout = ConditioningLayout { encoding: cfg, n_e: ne, use_gaze: true, n_v: nv };
        prop_assert_eq!(layout.total_len(), v.len());
    }
}

fn small_field(seed: u64) -> (FieldMlp, ParamSet<f32>) {
    let layout = ConditioningLayout {
        encoding: EncodingConfig { n_x: 6, n_p: 3, n_g: 3 },
        n_e: 4,
        use_gaze: true,
        n_v: 5,
    };
    let cfg = FieldConfig {
        depth: 3,
        width: 32,
        skip_at: Some(1),
        n_f: 6,
        feature_head: true,
    };
    let mlp = FieldMlp::new(cfg, layout).unwrap();
    let mut params = ParamSet::new();
    mlp.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
    (mlp, params)
}

fn cond_row(mlp: &FieldMlp) -> (Vec<f64>, Vec<f32>) {
    let e = [0.3, -0.1, 0.8, 0.0];
    let v = [0.1, 0.2, -0.3, 0.4, -0.5];
    let full = encode_conditioning(
        [0.5, 0.5],
        &[0.1, 0.05, -0.2, 0.3, -0.4, 0.0],
        &[0.2, -0.1],
        &e,
        &v,
        &mlp.layout.encoding,
        4,
        5,
    )
    .unwrap();
    let ds = mlp.layout.spatial_len();
    let row = full[ds..].iter().map(|&x| x as f32).collect();
    (full[ds..].to_vec(), row)
}

#[test]
fn grid_matches_independent_single_cell_calls() {
    let (mlp, params) = small_field(11);
    let (rest, row) = cond_row(&mlp);
    let (h, w) = (16, 16);
    let maps = mlp.evaluate_grid(&params, &row, h, w).unwrap();
    let n_f = mlp.config.n_f;
    for i in 0..h {
        for j in 0..w {
            let coord = [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64];
            let mut enc = positional_encode(coord[0], 6);
            enc.extend(positional_encode(coord[1], 6));
            enc.extend(&rest);
            let (f, c) = mlp.field_forward(&params, &enc).unwrap();
            for k in 0..n_f {
                let got = maps.features.data()[(k * h + i) * w + j];
                assert!((got - f[k]).abs() <= 1e-5, "feature {k} at ({i},{j})");
            }
            for k in 0..3 {
                let got = maps.color.data()[(k * h + i) * w + j];
                assert!((got - c[k]).abs() <= 1e-6);
                assert!((0.0..=1.0).contains(&got));
            }
        }
    }
}

#[test]
fn single_cell_grid_is_the_centre_evaluation() {
    let (mlp, params) = small_field(2);
    let (rest, row) = cond_row(&mlp);
    let maps = mlp.evaluate_grid(&params, &row, 1, 1).unwrap();
    let mut enc = positional_encode(0.5, 6);
    enc.extend(positional_encode(0.5, 6));
    enc.extend(&rest);
    let (f, c) = mlp.field_forward(&params, &enc).unwrap();
    for (a, b) in maps.features.data().iter().zip(&f) {
        assert!((a - b).abs() <= 1e-6);
    }
    for k in 0..3 {
        assert!((maps.color.data()[k] - c[k]).abs() <= 1e-6);
    }
}

#[test]
fn evaluation_is_independent_of_order_and_tiling() {
    let (mlp, params) = small_field(5);
    let (_, row) = cond_row(&mlp);
    let spatial: Tensor<f32> = grid_encoding(8, 8, &mlp.layout);
    let ds = mlp.layout.spatial_len();
    let (f_ref, c_ref) = mlp.evaluate_rows(&params, &spatial, &row, 4096).unwrap();
    let (f_tiled, c_tiled) = mlp.evaluate_rows(&params, &spatial, &row, 7).unwrap();
    assert_eq!(f_ref, f_tiled);
    assert_eq!(c_ref, c_tiled);

    let mut order: Vec<usize> = (0..64).collect();
    order.reverse();
    order.swap(3, 40);
    let shuffled: Vec<f32> = order.iter().flat_map(|&p| spatial.data()[p * ds..(p + 1) * ds].to_vec()).collect();
    let shuffled = Tensor::from_vec(&[64, ds], shuffled).unwrap();
    let (_, c_shuf) = mlp.evaluate_rows(&params, &shuffled, &row, 4096).unwrap();
    for (k, &p) in order.iter().enumerate() {
        assert_eq!(&c_shuf[k * 3..k * 3 + 3], &c_ref[p * 3..p * 3 + 3]);
    }
}

#[test]
fn field_length_mismatch_is_a_contract_error() {
    let (mlp, params) = small_field(1);
    let err = mlp.field_forward(&params, &[0.0; 3]).unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn repeated_grid_evaluation_is_bit_identical() {
    let (mlp, params) = small_field(9);
    let (_, row) = cond_row(&mlp);
    let a = mlp.evaluate_grid(&params, &row, 6, 10).unwrap();
    let b = mlp.evaluate_grid(&params, &row, 6, 10).unwrap();
    assert_eq!(a, b);
}

#[test]
fn coordinate_gradient_flows_through_the_encoding() {
    use dnp::encoding::frequencies;
    use dnp::numcore::{grad_check, GradCheckOptions};
    let mut params: ParamSet<f64> = ParamSet::new();
    params.insert("x", Tensor::from_vec(&[3, 1], vec![0.37, -0.81, 0.05]).unwrap().with_requires_grad(true));
    let probe: Vec<f64> = (0..3 * 9).map(|k| ((k * 7 % 9) as f64 - 4.0) / 4.0).collect();
    let f = |g: &mut Graph<f64>, p: &ParamSet<f64>| {
        let x = g.param(p, p.id("x")?);
        let e = g.sinusoid_lift(x, &frequencies(4))?;
        let w = g.constant(&[3, 9], probe.clone())?;
        let m = g.mul(e, w)?;
        Ok(g.sum(m))
    };
    let mut g = Graph::new();
    let x = g.param(&params, params.id("x").unwrap());
    let e = g.sinusoid_lift(x, &frequencies(4)).unwrap();
    for (r, x0) in [0.37, -0.81, 0.05].into_iter().enumerate() {
        let row = &g.value(e)[r * 9..(r + 1) * 9];
        for (a, b) in row.iter().zip(positional_encode(x0, 4)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let report = grad_check(f, &mut params, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
