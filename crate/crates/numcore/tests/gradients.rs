//! Analytic gradients against central finite differences.

use numcore::{
    adam_step, compare_gradients, grad_check, Activation, AdamState, GradCheckOptions, Graph, ParamSet, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-3,
        ..Default::default()
    }
}

fn params(shapes: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, shape) in shapes {
        p.insert(*name, Tensor::uniform(shape, 1.0, &mut rng).with_requires_grad(true));
    }
    p
}

/// A fixed random projection turns any tensor into a scalar with a
/// non-trivial gradient everywhere.
fn probe(g: &mut Graph<f64>, v: numcore::Var) -> numcore::Var {
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0) - 0.4).collect();
    let shape = g.shape(v).to_vec();
    let c = g.constant(&shape, w).unwrap();
    let m = g.mul(v, c).unwrap();
    g.sum(m)
}

#[test]
fn linear_function_is_exact() {
    let mut p = params(&[("x", &[3, 4])], 1);
    let r = grad_check(|g, p| {
        let x = g.param(p, p.id("x")?);
        let s = g.scale(x, 3.5);
        Ok(g.sum(s))
    }, &mut p, &opts()).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");

    let mut p32 = p.cast::<f32>();
    let r = grad_check(|g, p| {
        let x = g.param(p, p.id("x")?);
        Ok(g.sum(x))
    }, &mut p32, &GradCheckOptions { eps: 1e-2, ..opts() }).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    type Case = (&'static str, Vec<(&'static str, Vec<usize>)>, Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> numcore::Result<numcore::Var>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let b = g.param(p, p.id("b")?);
            let c = g.matmul(a, b)?;
            Ok(probe(g, c))
        })),
        ("add_sub_mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let b = g.param(p, p.id("b")?);
            let s = g.add(a, b)?;
            let d = g.sub(s, b)?;
            let m = g.mul(d, b)?;
            Ok(probe(g, m))
        })),
        ("add_row_scale", vec![("a", vec![4, 3]), ("r", vec![3])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let r = g.param(p, p.id("r")?);
            let s = g.add_row(a, r)?;
            let s = g.scale(s, -1.5);
            Ok(probe(g, s))
        })),
        ("activations", vec![("a", vec![5, 4])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let r = g.activate(a, Activation::Relu);
            let l = g.activate(a, Activation::LEAKY);
            let s = g.activate(a, Activation::Sigmoid);
            let n = g.activate(a, Activation::Sine);
            let c = g.concat_cols(&[r, l, s, n])?;
            Ok(probe(g, c))
        })),
        ("sinusoid_lift", vec![("a", vec![2, 3])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let e = g.sinusoid_lift(a, &[2.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI])?;
            Ok(probe(g, e))
        })),
        ("concat_transpose_reshape", vec![("a", vec![2, 3]), ("b", vec![1, 3])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let b = g.param(p, p.id("b")?);
            let r = g.concat_rows(&[a, b])?;
            let t = g.transpose(r)?;
            let t = g.reshape(t, &[9])?;
            Ok(probe(g, t))
        })),
        ("conv2d", vec![("x", vec![2, 5, 6]), ("k", vec![3, 2, 3, 3]), ("b", vec![3])], Box::new(|g, p| {
            let x = g.param(p, p.id("x")?);
            let k = g.param(p, p.id("k")?);
            let b = g.param(p, p.id("b")?);
            let y = g.conv2d(x, k, Some(b), 2, 1)?;
            Ok(probe(g, y))
        })),
        ("conv1d", vec![("x", vec![3, 8, 1]), ("k", vec![2, 3, 3, 1])], Box::new(|g, p| {
            let x = g.param(p, p.id("x")?);
            let k = g.param(p, p.id("k")?);
            let y = g.conv2d_ext(x, k, None, (2, 1), (1, 0))?;
            Ok(probe(g, y))
        })),
        ("upsample2x", vec![("x", vec![2, 3, 2])], Box::new(|g, p| {
            let x = g.param(p, p.id("x")?);
            let y = g.upsample2x(x)?;
            Ok(probe(g, y))
        })),
        ("softmax", vec![("x", vec![2, 5])], Box::new(|g, p| {
            let x = g.param(p, p.id("x")?);
            let y = g.softmax_rows(x)?;
            Ok(probe(g, y))
        })),
        ("mean_mse", vec![("a", vec![3, 3]), ("b", vec![3, 3])], Box::new(|g, p| {
            let a = g.param(p, p.id("a")?);
            let b = g.param(p, p.id("b")?);
            let l = g.mse(a, b)?;
            let m = g.mean(a);
            let m = g.mul(m, m)?;
            g.add(l, m)
        })),
    ];
    for (name, shapes, f) in cases {
        let shapes: Vec<(&str, &[usize])> = shapes.iter().map(|(n, s)| (*n, s.as_slice())).collect();
        let mut p = params(&shapes, 42);
        let r = grad_check(&*f, &mut p, &opts()).unwrap();
        assert!(r.max_rel_error < TOL, "{name}: {r:?}");
        assert!(r.checked > 0, "{name}: nothing checked");
    }
}

fn two_layer_mlp(g: &mut Graph<f64>, p: &ParamSet<f64>) -> numcore::Result<numcore::Var> {
    let x = g.param(p, p.id("x")?);
    let w1 = g.param(p, p.id("w1")?);
    let b1 = g.param(p, p.id("b1")?);
    let w2 = g.param(p, p.id("w2")?);
    let b2 = g.param(p, p.id("b2")?);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.activate(h, Activation::Relu);
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    let o = g.activate(o, Activation::Sigmoid);
    let t = g.constant(&[6, 2], vec![0.3; 12])?;
    g.mse(o, t)
}

fn mlp_params(seed: u64) -> ParamSet<f64> {
    params(&[("x", &[6, 5]), ("w1", &[5, 16]), ("b1", &[16]), ("w2", &[16, 2]), ("b2", &[2])], seed)
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..3 {
        let mut p = mlp_params(seed);
        let r = grad_check(two_layer_mlp, &mut p, &opts()).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut p = mlp_params(5);
    p.zero_grads();
    let mut g = Graph::new();
    let l = two_layer_mlp(&mut g, &p).unwrap();
    g.backward(l, &mut p).unwrap();
    let id = p.id("b2").unwrap();
    let gr = p.get_mut(id).grad_mut().unwrap();
    gr[0] *= 2.0;
    let r = compare_gradients(two_layer_mlp, &mut p, &opts()).unwrap();
    assert!(r.max_rel_error > 0.4, "{r:?}");
    assert_eq!(r.worst().unwrap().name, "b2");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let base = mlp_params(11).cast::<f32>();
    let loss_a = |g: &mut Graph<f32>, p: &ParamSet<f32>| {
        let w1 = g.param(p, p.id("w1").unwrap());
        let x = g.param(p, p.id("x").unwrap());
        let h = g.matmul(x, w1).unwrap();
        let h = g.activate(h, Activation::Sigmoid);
        g.mean(h)
    };
    let loss_b = |g: &mut Graph<f32>, p: &ParamSet<f32>| {
        let w1 = g.param(p, p.id("w1").unwrap());
        let s = g.activate(w1, Activation::Sine);
        g.sum(s)
    };
    let mut sep = base.clone();
    for f in [&loss_a as &dyn Fn(&mut Graph<f32>, &ParamSet<f32>) -> numcore::Var, &loss_b] {
        let mut g = Graph::new();
        let l = f(&mut g, &sep);
        g.backward(l, &mut sep).unwrap();
    }
    let mut joint = base.clone();
    let mut g = Graph::new();
    let la = loss_a(&mut g, &joint);
    let lb = loss_b(&mut g, &joint);
    let l = g.add(la, lb).unwrap();
    g.backward(l, &mut joint).unwrap();
    for name in ["w1", "x"] {
        let a = sep.by_name(name).unwrap().grad().unwrap();
        let b = joint.by_name(name).unwrap().grad().unwrap();
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-6, "{name}: {u} vs {v}");
        }
    }
}

#[test]
fn adam_minimizes_a_parabola() {
    let mut p = ParamSet::<f64>::new();
    let id = p.insert("x", Tensor::from_vec(&[1], vec![1.0]).unwrap().with_requires_grad(true));
    let mut st = AdamState::new(&p, 0.1);
    for _ in 0..100 {
        p.zero_grads();
        let mut g = Graph::new();
        let x = g.param(&p, id);
        let sq = g.mul(x, x).unwrap();
        g.backward(sq, &mut p).unwrap();
        adam_step(&mut p, &mut st).unwrap();
    }
    let x = p.get(id).data()[0];
    assert!(x.abs() < 0.05);
    // Independent scalar reference run of the same recurrence.
    assert!((x - 0.002_936_675_681).abs() < 1e-9, "{x}");
}
