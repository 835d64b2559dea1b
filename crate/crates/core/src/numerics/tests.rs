use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_input, check_params, DEFAULT_STEP};
use super::kernels;
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], f: usize, ks: usize, stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; f * oh * ow];
    for fo in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..c {
                    for i in 0..ks {
                        for j in 0..ks {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let xx = (ox * stride + j) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += x[(ci * h + y as usize) * w + xx as usize] * k[((fo * c + ci) * ks + i) * ks + j];
                            }
                        }
                    }
                }
                out[(fo * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

/// erf by its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::<f64>::new(false, 0);
    let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.input(t(&[1, 2], &[1.0, 2.0]));
    let b = g.input(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new(false, 0);
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_and_conv_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let fast = kernels::matmul(a.data(), b.data(), m, k, n);
        assert!(max_diff(&fast, &naive_matmul(a.data(), b.data(), m, k, n)) <= 1e-12);
    }
    for (stride, pad, ks) in [(1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 2, 2)] {
        let (c, h, w, f) = (3, 11, 9, 4);
        let x = random(&[c, h, w], &mut rng);
        let k = random(&[f, c, ks, ks], &mut rng);
        let mut g = Graph::<f64>::new(false, 0);
        let xv = g.input(x.clone());
        let kv = g.input(k.clone());
        let y = g.conv2d(xv, kv, None, stride, pad).unwrap();
        let reference = naive_conv(x.data(), c, h, w, k.data(), f, ks, stride, pad);
        assert!(max_diff(g.value(y).data(), &reference) <= 1e-12);
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let check = check_input("a", &a, DEFAULT_STEP, |g, x| {
        let bv = g.input(b.clone());
        let p = g.matmul(x, bv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(check.rel_err <= 1e-6, "{check:?}");
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new(false, 0);
    let x = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ident = g.input(t(&[1, 1, 1, 1], &[1.0]));
    let zero_bias = g.input(t(&[1], &[0.0]));
    let y = g.conv2d(x, ident, Some(zero_bias), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let ones = g.input(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, ones, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);

    let mut g = Graph::<f32>::inference();
    let img = g.input(Tensor::zeros(vec![3, 224, 224]));
    let k = g.input(Tensor::zeros(vec![32, 3, 7, 7]));
    let y = g.conv2d(img, k, None, 2, 3).unwrap();
    assert_eq!(g.shape(y), &[32, 112, 112]);
}

#[test]
fn conv2d_rejects_oversized_kernel() {
    let mut g = Graph::<f64>::new(false, 0);
    let x = g.input(Tensor::zeros(vec![1, 3, 3]));
    let k = g.input(Tensor::zeros(vec![1, 1, 5, 5]));
    assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(Error::Dimension(_))));
    assert!(g.conv2d(x, k, None, 1, 1).is_ok());
}

fn ln_plain(g: &mut Graph<f64>, x: Var, d: usize, eps: f64) -> Var {
    let gamma = g.input(Tensor::full(vec![d], 1.0));
    let beta = g.input(Tensor::zeros(vec![d]));
    g.layer_norm(x, gamma, beta, eps).unwrap()
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new(false, 0);
    let c = g.input(Tensor::full(vec![1, 4], 3.5));
    let y = ln_plain(&mut g, c, 4, 1e-5);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let r = g.input(t(&[1, 2], &[1.0, 3.0]));
    let y = ln_plain(&mut g, r, 2, 1e-300);
    assert!(max_diff(g.value(y).data(), &[-1.0, 1.0]) < 1e-12);
}

#[test]
fn layer_norm_rows_are_standardized() {
    // Unit variance up to eps/var, so rows need var >> eps / 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![16, 32], |_| rng.random_range(-100.0..100.0));
    let mut g = Graph::<f64>::new(false, 0);
    let xv = g.input(x);
    let y = ln_plain(&mut g, xv, 32, 1e-5);
    for row in g.value(y).data().chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6, "var {var}");
    }
}

#[test]
fn gelu_values() {
    assert_eq!(kernels::gelu(0.0f64), 0.0);
    assert!((kernels::gelu(10.0f64) - 10.0).abs() <= 1e-6);
    let oracle = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
    assert!((oracle - 0.841345).abs() <= 1e-5);
    assert!((kernels::gelu(1.0f64) - oracle).abs() <= 1e-12);
    for x in [-3.0, -0.7, 0.2, 1.9] {
        let exact = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
        assert!((kernels::gelu(x) - exact).abs() <= 1e-12);
    }
}

fn ce(logits: &[f64], labels: &[usize]) -> f64 {
    let mut g = Graph::<f64>::new(false, 0);
    let c = logits.len() / labels.len();
    let l = g.input(t(&[labels.len(), c], logits));
    let loss = g.softmax_cross_entropy(l, labels).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn cross_entropy_examples() {
    assert!((ce(&[0.3, 0.3], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(ce(&[1e4, 0.0], &[0]) < 1e-6);
    let closed = (1.0 + (-1.0f64).exp()).ln();
    assert!((ce(&[1.0, 0.0], &[0]) - closed).abs() < 1e-12);
    assert!((closed - 0.313262).abs() < 1e-6);

    let mut g = Graph::<f64>::new(false, 0);
    let l = g.input(Tensor::zeros(vec![1, 2]));
    assert!(matches!(g.softmax_cross_entropy(l, &[2]), Err(Error::Index(_))));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..70).map(|_| rng.random_range(-30.0..30.0)).collect();
    for row in kernels::softmax_rows(&x, 7).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn aux_layer_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[4, 5], &mut rng);

    let mut g = Graph::<f64>::new(false, 1);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.5).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::<f64>::new(true, 1);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
    assert!(matches!(g.dropout(xv, 1.0), Err(Error::Config(_))));
    assert!(matches!(g.dropout(xv, -0.1), Err(Error::Config(_))));

    let y = g.dropout(xv, 0.5).unwrap();
    for (&a, &b) in g.value(y).data().iter().zip(x.data()) {
        assert!(a == 0.0 || a == 2.0 * b);
    }

    let c = g.input(Tensor::full(vec![64, 32, 32], 0.25));
    let p = g.adaptive_avg_pool2d(c, 8, 8).unwrap();
    assert_eq!(g.shape(p), &[64, 8, 8]);
    assert!(g.value(p).data().iter().all(|&v| v == 0.25));

    let z = g.input(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item().unwrap(), 0.5);
}

#[test]
fn adaptive_pool_uneven_bins() {
    // 5 -> 2 bins: rows {0,1,2} and {2,3,4}.
    let mut g = Graph::<f64>::new(false, 0);
    let x = g.input(Tensor::from_fn(vec![1, 5, 1], |i| i as f64));
    let y = g.adaptive_avg_pool2d(x, 2, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 3.0]);
}

#[test]
fn adaptive_pool_upsamples_with_overlapping_bins() {
    // 2 -> 3 bins: rows {0}, {0,1}, {1}.
    let mut g = Graph::<f64>::new(false, 0);
    let x = g.input(Tensor::from_fn(vec![1, 2, 1], |i| i as f64 * 2.0));
    let y = g.adaptive_avg_pool2d(x, 3, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let x = t(&[3], &[1.0, -2.0, 0.5]);
    let mut g = Graph::<f64>::new(true, 0);
    let xv = g.input(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(xv).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.input(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let mut g = Graph::<f64>::inference();
    let x = g.input(Tensor::zeros(vec![1]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn composite_conv_gelu_layernorm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    store.register("k", random(&[4, 2, 3, 3], &mut rng)).unwrap();
    store.register("gamma", random(&[5], &mut rng)).unwrap();
    store.register("beta", random(&[5], &mut rng)).unwrap();
    store.register("unused", random(&[3], &mut rng)).unwrap();
    let x = random(&[2, 7, 7], &mut rng);
    let r = random(&[4, 5, 5], &mut rng);
    let build = |s: &ParamStore<f64>| {
        let mut g = Graph::new(true, 0);
        let xv = g.input(x.clone());
        let k = g.param(s, "k")?;
        let y = g.conv2d(xv, k, None, 1, 0)?;
        let y = g.gelu(y);
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        let y = g.layer_norm(y, gamma, beta, 1e-5)?;
        let rv = g.input(r.clone());
        let y = g.mul(y, rv)?;
        let loss = g.sum(y);
        Ok((g, loss))
    };
    let names: Vec<String> = ["k", "gamma", "beta"].iter().map(|s| s.to_string()).collect();
    let checks = check_params(&store, &names, 0, DEFAULT_STEP, &mut rng, build).unwrap();
    for c in checks {
        assert!(c.rel_err <= 1e-6, "{c:?}");
    }

    // Unreachable parameters receive explicit zeros.
    let mut s = store.clone();
    let (g, loss) = build(&s).unwrap();
    g.backward_into(loss, &mut s).unwrap();
    assert!(s.grad("unused").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::<f64>::new();
    store.register("w", t(&[2], &[0.3, -1.2])).unwrap();
    let mut g = Graph::new(true, 0);
    let w = g.param(&store, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward_into(loss, &mut store).unwrap();
    let once = store.grad("w").unwrap().clone();
    g.backward_into(loss, &mut store).unwrap();
    let twice = store.grad("w").unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn param_store_rejects_duplicates() {
    let mut store = ParamStore::<f32>::new();
    store.register("a", Tensor::zeros(vec![1])).unwrap();
    assert!(store.register("a", Tensor::zeros(vec![1])).is_err());
    assert!(store.register_buffer("a", Tensor::zeros(vec![1])).is_err());
}

#[test]
fn gather_and_concat_round_trip() {
    let mut g = Graph::<f64>::new(false, 0);
    let a = g.input(Tensor::from_fn(vec![2, 3], |i| i as f64));
    let b = g.input(Tensor::from_fn(vec![2, 1], |i| 10.0 + i as f64));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).data(), &[0.0, 1.0, 2.0, 10.0, 3.0, 4.0, 5.0, 11.0]);
    let idx = Arc::new(vec![3, 7]);
    let last = g.gather(c, idx, &[2]).unwrap();
    assert_eq!(g.value(last).data(), &[10.0, 11.0]);
    assert!(matches!(g.gather(c, Arc::new(vec![8]), &[1]), Err(Error::Index(_))));
}

#[test]
fn every_op_passes_gradcheck_on_ten_seeds() {
    for seed in 0..10 {
        for check in crate::verify::numerics_op_checks(seed).unwrap() {
            assert!(check.rel_err <= 1e-6, "seed {seed}: {check:?}");
        }
    }
}

#[test]
fn batch_norm_tracks_running_statistics() {
    let mut store = ParamStore::<f64>::new();
    let bn = nn::BatchNorm2d::new("bn", 2);
    bn.init(&mut store).unwrap();
    let x = Tensor::from_fn(vec![2, 2, 1, 2], |i| i as f64);
    let mut g = Graph::new(true, 0);
    let xv = g.input(x.clone());
    bn.forward(&mut g, &store, xv).unwrap();
    let updates = g.take_buffer_updates();
    store.apply_buffer_updates(updates).unwrap();
    // channel 0 sees {0,1,4,5}: mean 2.5, unbiased var 17/3
    let rm = store.buffer("bn.running_mean").unwrap().data().to_vec();
    let rv = store.buffer("bn.running_var").unwrap().data().to_vec();
    assert!((rm[0] - 0.25).abs() < 1e-12);
    assert!((rv[0] - (0.9 + 0.1 * 17.0 / 3.0)).abs() < 1e-12);

    // Eval mode with default stats (mean 0, var 1) is identity up to eps.
    let fresh = {
        let mut s = ParamStore::<f64>::new();
        bn.init(&mut s).unwrap();
        s
    };
    let mut g = Graph::new(false, 0);
    let xv = g.input(x.clone());
    let y = bn.forward(&mut g, &fresh, xv).unwrap();
    assert!(max_diff(g.value(y).data(), x.data()) < 1e-4);
}
