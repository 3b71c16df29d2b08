//! Operator results against direct-sum oracles and hand-computed values.

use numcore::{Activation, Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::uniform(shape, 1.0, rng)
}

fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f32],
    k: &[f32],
    (c_in, h, w): (usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((co * c_in + ci) * kh + ky) * kw + kx] as f64
                                * x[(ci * h + iy as usize) * w + ix as usize] as f64;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f32>::new();
    let i2 = g.constant(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
    let p = g.matmul(i2, i2).unwrap();
    assert_eq!(g.value(p), &[1., 0., 0., 1.]);
    let a = g.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = g.constant(&[2, 1], vec![0., 1.]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[2., 4.]);
    assert!(g.matmul(b, b).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = if seed == 0 { (7, 5, 3) } else { (rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..20)) };
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.input(&a, false), g.input(&b, false));
        let c = g.matmul(va, vb).unwrap();
        let want = matmul_oracle(a.data(), b.data(), m, k, n);
        for (got, want) in g.value(c).iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn conv_identity_and_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 5, 4], &mut rng);
    let mut g = Graph::new();
    let vx = g.input(&x, false);
    let k = g.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = g.conv2d(vx, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), x.data());

    let ones = g.constant(&[1, 3, 3], vec![1.0; 9]).unwrap();
    let k3 = g.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let s = g.conv2d(ones, k3, None, 1, 0).unwrap();
    assert_eq!(g.shape(s), &[1, 1, 1]);
    assert_eq!(g.value(s), &[9.0]);

    let small = g.constant(&[1, 2, 2], vec![1.0; 4]).unwrap();
    assert!(g.conv2d(small, k3, None, 1, 0).is_err());
}

#[test]
fn conv_matches_direct_sum() {
    let cases = [
        ((3, 8, 8), (4, 3, 3), 1, 1),
        ((2, 9, 7), (5, 3, 3), 2, 1),
        ((4, 6, 6), (2, 1, 1), 1, 0),
        ((1, 16, 1), (3, 3, 1), 2, 0),
        ((6, 5, 11), (3, 5, 3), 1, 2),
        ((16, 20, 20), (8, 3, 3), 1, 1),
    ];
    for (seed, &(ins, ks, stride, pad)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 100);
        let x = rand_tensor(&[ins.0, ins.1, ins.2], &mut rng);
        let k = rand_tensor(&[ks.0, ins.0, ks.1, ks.2], &mut rng);
        let mut g = Graph::new();
        let (vx, vk) = (g.input(&x, false), g.input(&k, false));
        let y = if ks.1 == ks.2 {
            g.conv2d(vx, vk, None, stride, pad).unwrap()
        } else {
            g.conv2d_ext(vx, vk, None, (stride, stride), (pad, pad)).unwrap()
        };
        let (want, oh, ow) = conv_oracle(x.data(), k.data(), ins, ks, stride, pad);
        assert_eq!(g.shape(y), &[ks.0, oh, ow]);
        for (got, want) in g.value(y).iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5, "case {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f32>::new();
    let one = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
    let v = g.input(&one, false);
    let u = g.upsample2x(v).unwrap();
    assert_eq!(g.value(u), &[1.0; 4]);

    let c = Tensor::full(&[2, 3, 5], 0.25f32);
    let vc = g.input(&c, false);
    let uc = g.upsample2x(vc).unwrap();
    assert_eq!(g.shape(uc), &[2, 6, 10]);
    assert!(g.value(uc).iter().all(|&v| v == 0.25));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[3, 4, 2], &mut rng);
    let mut g = Graph::new();
    let vx = g.input(&x, true);
    let u = g.upsample2x(vx).unwrap();
    let s = g.sum(u);
    g.backward(s, &mut ParamSet::new()).unwrap();
    assert!(g.grad(vx).unwrap().iter().all(|&d| d == 4.0));
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let r = g.activate(x, Activation::Relu);
    assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
    let l = g.activate(x, Activation::LEAKY);
    assert!((g.value(l)[0] + 0.2).abs() < 1e-7);
    let s = g.activate(x, Activation::Sigmoid);
    assert_eq!(g.value(s)[1], 0.5);
    let sn = g.activate(x, Activation::Sine);
    assert_eq!(g.value(sn)[1], 0.0);
}

#[test]
fn backward_simple_losses() {
    let x = Tensor::from_vec(&[2, 3], vec![0.5f32, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
    let mut g = Graph::new();
    let vx = g.input(&x, true);
    let s = g.sum(vx);
    g.backward(s, &mut ParamSet::new()).unwrap();
    assert!(g.grad(vx).unwrap().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let vx = g.input(&x, true);
    let sq = g.mul(vx, vx).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half, &mut ParamSet::new()).unwrap();
    assert_eq!(g.grad(vx).unwrap(), x.data());

    // non-scalar losses are rejected
    assert!(g.backward(vx, &mut ParamSet::new()).is_err());
}

#[test]
fn repeated_backward_accumulates() {
    let mut params = ParamSet::new();
    let id = params.insert("w", Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap().with_requires_grad(true));
    let mut g = Graph::new();
    let w = g.param(&params, id);
    let s = g.sum(w);
    g.backward(s, &mut params).unwrap();
    g.backward(s, &mut params).unwrap();
    assert_eq!(params.get(id).grad().unwrap(), &[2.0, 2.0]);
    params.zero_grads();
    assert_eq!(params.get(id).grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 100.0, -3.0, 2.0, 0.5]).unwrap();
    let y = g.softmax_rows(x).unwrap();
    assert!(g.value(y)[..4].iter().all(|&v| (v - 0.25).abs() < 1e-7));
    let s: f32 = g.value(y)[4..].iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn sinusoid_lift_layout() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[1, 2], vec![0.0, 0.5]).unwrap();
    let y = g.sinusoid_lift(x, &[std::f64::consts::PI]).unwrap();
    let v = g.value(y);
    assert_eq!(g.shape(y), &[1, 6]);
    assert_eq!(&v[..3], &[0.0, 0.0, 1.0]);
    assert_eq!(v[3], 0.5);
    assert!((v[4] - 1.0).abs() < 1e-15 && v[5].abs() < 1e-15);
}

fn ops_graph(x: &Tensor<f32>, k: &Tensor<f32>) -> Vec<f32> {
    let mut g = Graph::new();
    let vx = g.input(x, false);
    let vk = g.input(k, false);
    let c = g.conv2d(vx, vk, None, 1, 1).unwrap();
    let a = g.activate(c, Activation::LEAKY);
    let u = g.upsample2x(a).unwrap();
    g.value(u).to_vec()
}

#[test]
fn ops_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[4, 12, 12], &mut rng);
    let k = rand_tensor(&[6, 4, 3, 3], &mut rng);
    let a = ops_graph(&x, &k);
    let b = ops_graph(&x, &k);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_oracle_property(
        c_in in 1usize..4, c_out in 1usize..4, h in 3usize..10, w in 3usize..10,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[c_in, h, w], &mut rng);
        let kt = rand_tensor(&[c_out, c_in, k, k], &mut rng);
        let mut g = Graph::new();
        let (vx, vk) = (g.input(&x, false), g.input(&kt, false));
        let y = g.conv2d(vx, vk, None, stride, pad).unwrap();
        let (want, _, _) = conv_oracle(x.data(), kt.data(), (c_in, h, w), (c_out, k, k), stride, pad);
        for (got, want) in g.value(y).iter().zip(&want) {
            prop_assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_weights_sum_to_one(logits in prop::collection::vec(-30.0f32..30.0, 1..16)) {
        let mut g = Graph::new();
        let n = logits.len();
        let x = g.constant(&[1, n], logits).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let s: f32 = g.value(y).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(g.value(y).iter().all(|&v| v >= 0.0));
    }
}
