use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Grad-checks `f` at 10 random points of the given shape.
fn check_op<F>(shape: &[usize], f: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = rand_tensor(&mut rng, shape);
        let report = grad_check(&f, &p, 1e-4).unwrap();
        assert!(
            report.passed,
            "max rel error {} at {}",
            report.max_rel_error, report.worst_index
        );
    }
}

fn scalar_graph(f: impl Fn(&mut Graph, Var) -> Var, x: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let v = g.param(Tensor::scalar(x));
    let y = f(&mut g, v);
    let s = g.sum(y);
    let grad = g.backward(s).unwrap().get(v).unwrap().item();
    (g.value(y).item(), grad)
}

#[test]
fn tanh_and_relu_at_trivial_points() {
    assert_eq!(scalar_graph(|g, v| g.tanh(v), 0.0), (0.0, 1.0));
    assert_eq!(scalar_graph(|g, v| g.relu(v), -3.0), (0.0, 0.0));
}

#[test]
fn matmul_shape_algebra() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 1]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), [2, 1]);
    let err = g.matmul(b, b).unwrap_err().to_string();
    assert!(err.contains("[3, 1]"), "{err}");
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn lncosh_values() {
    assert_eq!(scalar_graph(|g, v| g.lncosh(v), 0.0), (0.0, 0.0));
    let (y, _) = scalar_graph(|g, v| g.lncosh(v), 50.0);
    assert!((y - (50.0 - std::f64::consts::LN_2)).abs() < 1e-12);
    assert!((y - 49.306_852_819_440_05).abs() < 1e-12);
    // The asymptotic branch joins the direct formula without a visible seam.
    let direct = 20.0f64.cosh().ln();
    assert!((kernels::lncosh(20.0 + 1e-12) - direct).abs() < 1e-12);
    assert!(kernels::lncosh(1e3).is_finite());
}

#[test]
fn elementwise_ops_pass_grad_check() {
    check_op(&[3, 4], |g, x| Ok(g.sum(x)));
    check_op(&[3, 4], |g, x| {
        let t = g.tanh(x);
        Ok(g.sum(t))
    });
    check_op(&[3, 4], |g, x| {
        let t = g.lncosh(x);
        Ok(g.sum(t))
    });
    check_op(&[3, 4], |g, x| {
        let t = g.exp(x);
        Ok(g.sum(t))
    });
    check_op(&[3, 4], |g, x| {
        let e = g.exp(x);
        let l = g.log(e);
        let s = g.mul(l, x)?;
        Ok(g.sum(s))
    });
    check_op(&[3, 4], |g, x| {
        let a = g.abs(x);
        let s = g.mul(a, x)?;
        Ok(g.sum(s))
    });
    check_op(&[3, 4], |g, x| {
        let r = g.relu(x);
        let s = g.mul(r, x)?;
        Ok(g.sum(s))
    });
    check_op(&[3, 4], |g, x| {
        let c = g.clamp(x, -1.0, 1.0);
        let s = g.mul(c, x)?;
        Ok(g.sum(s))
    });
    check_op(&[3, 4], |g, x| {
        let e = g.exp(x);
        let d = g.div(x, e)?;
        let s = g.scale(d, 0.7);
        let o = g.offset(s, 3.0);
        let m = g.mul(o, o)?;
        Ok(g.sum(m))
    });
}

#[test]
fn broadcast_and_reductions_pass_grad_check() {
    check_op(&[12], |g, x| {
        let m = g.reshape(x, &[3, 4])?;
        let row = g.gather(x, &[0, 5, 5, 11])?;
        let s = g.sub(m, row)?;
        let p = g.mul(s, m)?;
        let r = g.sum_rows(p)?;
        let t = g.tanh(r);
        Ok(g.sum(t))
    });
    check_op(&[6], |g, x| {
        let s = g.softmax(x)?;
        let w = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]));
        let p = g.mul(s, w)?;
        Ok(g.sum(p))
    });
}

#[test]
fn matmul_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, &[4, 2]);
    check_op(&[3, 4], move |g, x| {
        let wv = g.param(w.clone());
        let y = g.matmul(x, wv)?;
        let t = g.tanh(y);
        Ok(g.sum(t))
    });
    // Gradient with respect to the right operand.
    let a = rand_tensor(&mut rng, &[3, 4]);
    check_op(&[4, 2], move |g, w| {
        let av = g.constant(a.clone());
        let b = g.constant(Tensor::vector(vec![0.1, -0.2]));
        let y = g.affine(av, w, b)?;
        let t = g.tanh(y);
        Ok(g.sum(t))
    });
}

#[allow(clippy::needless_range_loop)]
fn conv_oracle(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let s = input.shape();
    let k = kernel.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (o, kk) = (k[0], k[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        for i in 0..kk {
                            for j in 0..kk {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (x * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((bi * c + ci) * h + yy as usize) * w + xx as usize];
                                let kv = kernel.data()[((oi * c + ci) * kk + i) * kk + j];
                                acc += iv * kv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_and_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &input);

    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), [9.0]);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let kernel = rand_tensor(&mut rng, &[1, 1, 2, 2]);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(kernel.clone());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    let oracle = conv_oracle(&input, &kernel, &[0.0], 1, 0);
    for (a, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }

    let input = rand_tensor(&mut rng, &[2, 3, 6, 6]);
    let kernel = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let bias = vec![0.1, -0.2, 0.3, 0.0];
    let x = g.constant(input.clone());
    let k = g.constant(kernel.clone());
    let b = g.constant(Tensor::vector(bias.clone()));
    let y = g.conv2d(x, k, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), [2, 4, 3, 3]);
    let oracle = conv_oracle(&input, &kernel, &bias, 2, 1);
    for (a, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, k, b, 1, 0).is_err());
    let k = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
    assert!(g.conv2d(x, k, b, 1, 0).is_err());
}

#[test]
fn conv2d_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kernel = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    check_op(&[2, 2, 5, 5], move |g, x| {
        let k = g.param(kernel.clone());
        let b = g.param(Tensor::vector(vec![0.1, 0.2, -0.1]));
        let y = g.conv2d(x, k, b, 2, 1)?;
        let t = g.tanh(y);
        Ok(g.sum(t))
    });
    let input = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    check_op(&[3, 2, 3, 3], move |g, k| {
        let x = g.constant(input.clone());
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d(x, k, b, 1, 1)?;
        let t = g.tanh(y);
        let p = g.global_avg_pool(t)?;
        Ok(g.sum(p))
    });
}

fn maxpool_oracle(x: &Tensor) -> Vec<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::new();
    for i in (0..h).step_by(2) {
        for j in (0..w).step_by(2) {
            let m = [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)]
                .iter()
                .map(|&(a, b)| x.data()[a * w + b])
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    out
}

#[test]
fn maxpool2_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), [4.0]);

    let c = g.param(Tensor::full(&[2, 2], 2.5));
    let y = g.maxpool2(c).unwrap();
    let s = g.sum(y);
    assert_eq!(g.value(y).data(), [2.5]);
    let grad = g.backward(s).unwrap().get(c).unwrap();
    assert_eq!(grad.data(), [1.0, 0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = rand_tensor(&mut rng, &[4, 4]);
    let x = g.constant(r.clone());
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), maxpool_oracle(&r).as_slice());

    let odd = g.constant(Tensor::zeros(&[3, 4]));
    assert!(g.maxpool2(odd).is_err());
}

#[test]
fn upsample2_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1], vec![5.0]).unwrap());
    let y = g.upsample2(x).unwrap();
    assert_eq!(g.value(y).data(), [5.0; 4]);
    let s = g.sum(y);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), [4.0]);

    // Constant image survives maxpool followed by upsample.
    let c = g.constant(Tensor::full(&[3, 4, 4], 0.3));
    let p = g.maxpool2(c).unwrap();
    let u = g.upsample2(p).unwrap();
    assert_eq!(g.value(u), g.value(c));
}

#[test]
fn pooling_passes_grad_check() {
    check_op(&[2, 4, 4], |g, x| {
        let p = g.maxpool2(x)?;
        let u = g.upsample2(p)?;
        let d = g.sub(x, u)?;
        let m = g.mul(d, x)?;
        Ok(g.sum(m))
    });
}

#[test]
fn batchnorm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[8, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batchnorm_train(xv, gamma, beta, BN_EPS).unwrap();
    assert_eq!(stats.mean.len(), 3);
    let y = g.value(y);
    for f in 0..3 {
        let col: Vec<f64> = (0..8).map(|b| y.data()[b * 3 + f]).collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_identity_on_standardized_input() {
    let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let (y, _) = g.batchnorm_train(xv, gamma, beta, BN_EPS).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_rejects_single_sample_in_train_mode() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 3]));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    assert!(g.batchnorm_train(xv, gamma, beta, BN_EPS).is_err());
    assert!(g
        .batchnorm_eval(xv, gamma, beta, &[0.0; 3], &[1.0; 3], BN_EPS)
        .is_ok());
}

#[test]
fn batchnorm_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let gamma = Tensor::vector(vec![1.2, 0.7, -0.4]);
    let beta = Tensor::vector(vec![0.1, 0.0, 0.3]);
    check_op(&[5, 3], |g, x| {
        let gv = g.param(gamma.clone());
        let bv = g.param(beta.clone());
        let (y, _) = g.batchnorm_train(x, gv, bv, BN_EPS)?;
        let wv = g.constant(w.clone());
        let t = g.tanh(y);
        let p = g.mul(t, wv)?;
        Ok(g.sum(p))
    });
    // Spatial (per-channel) layout, gradient with respect to gamma as well.
    let w4 = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    check_op(&[3], move |g, gm| {
        let x = g.constant(w4.clone());
        let bv = g.constant(Tensor::zeros(&[3]));
        let (y, _) = g.batchnorm_train(x, gm, bv, BN_EPS)?;
        let t = g.tanh(y);
        let m = g.mul(t, x)?;
        Ok(g.sum(m))
    });
    check_op(&[4, 3], |g, x| {
        let gv = g.param(gamma.clone());
        let bv = g.param(beta.clone());
        let y = g.batchnorm_eval(x, gv, bv, &[0.1, -0.2, 0.0], &[0.5, 2.0, 1.0], BN_EPS)?;
        let t = g.tanh(y);
        Ok(g.sum(t))
    });
}

#[test]
fn softmax_examples() {
    let s = softmax(&[0.3; 4]);
    assert!(s.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let s = softmax(&[0.0, 3f64.ln()]);
    assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    let logits = [0.2, -1.0, 4.0, 2.5];
    let shifted: Vec<f64> = logits.iter().map(|x| x + 17.0).collect();
    for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_and_schedule() {
    let mut store = ParamStore::new();
    store.trainable.insert("w".into(), Tensor::scalar(2.0));
    let mut adam = AdamState::new(0.001, 100.0);
    let grads = [("w".to_string(), Tensor::scalar(1.0))]
        .into_iter()
        .collect();
    adam.step(&mut store, &grads, 0).unwrap();
    // m̂ = 1, v̂ = 1, so the step is η/(1 + ε).
    let expected = 2.0 - 0.001 / (1.0 + 1e-8);
    assert!((store.trainable["w"].item() - expected).abs() < 1e-15);
    assert_eq!(adam.learning_rate(100), 0.0005);
    assert_eq!(adam.learning_rate(0), 0.001);
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut store = ParamStore::new();
    store
        .trainable
        .insert("w".into(), Tensor::vector(vec![1.0, -2.0, 3.5]));
    let before = store.clone();
    let mut adam = AdamState::new(0.001, 100.0);
    let grads = [("w".to_string(), Tensor::zeros(&[3]))]
        .into_iter()
        .collect();
    for epoch in 0..5 {
        adam.step(&mut store, &grads, epoch).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut store = ParamStore::new();
    store.trainable.insert("enc.W".into(), Tensor::scalar(1.0));
    let mut adam = AdamState::new(0.001, 100.0);
    let grads = [("enc.W".to_string(), Tensor::scalar(f64::NAN))]
        .into_iter()
        .collect();
    let err = adam.step(&mut store, &grads, 0).unwrap_err().to_string();
    assert!(err.contains("enc.W"), "{err}");
    assert_eq!(store.trainable["enc.W"].item(), 1.0);
    assert_eq!(adam.t, 0);
}

#[test]
fn grad_check_examples() {
    let sq = |g: &mut Graph, x: Var| -> Result<Var> {
        let m = g.mul(x, x)?;
        Ok(g.sum(m))
    };
    let r = grad_check(sq, &Tensor::scalar(3.0), 1e-8).unwrap();
    assert!(r.passed);
    assert!((r.analytic[0] - 6.0).abs() < 1e-12);
    assert!(relative_error(r.analytic[0], r.numeric[0], 1e-8) <= 1e-8);

    let abs = |g: &mut Graph, x: Var| -> Result<Var> {
        let a = g.abs(x);
        Ok(g.sum(a))
    };
    let r = grad_check(abs, &Tensor::scalar(0.0), 1e-4).unwrap();
    assert_eq!(r.kinks, vec![0]);
    assert!((-1.0..=1.0).contains(&r.analytic[0]));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut store = ParamStore::new();
    store
        .trainable
        .insert("level1.encoder.W".into(), Tensor::zeros(&[3, 2]));
    store.trainable.insert("b".into(), Tensor::scalar(-0.0));
    store.buffers.insert(
        "x.running_var".into(),
        Tensor::vector(vec![1.0, f64::MIN_POSITIVE]),
    );
    let mut adam = AdamState::new(0.001, 100.0);
    let grads = [("b".to_string(), Tensor::scalar(0.25))]
        .into_iter()
        .collect();
    adam.step(&mut store, &grads, 3).unwrap();
    let ck = Checkpoint {
        params: store,
        adam,
    };
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back, ck);

    assert!(Checkpoint::from_bytes(b"ACE0").is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
