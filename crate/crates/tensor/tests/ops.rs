use std::sync::Arc;

use flsc_tensor::gradcheck::check_gradients;
use flsc_tensor::{Graph, ModelWeights, NormStats, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinked activations stay differentiable
/// under the finite-difference step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

/// Weighted sum with fixed pseudo-random coefficients, so every output
/// element carries a distinct gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let shape = g.shape(v).to_vec();
    let coeffs: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let c = g.constant(shape, coeffs)?;
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

fn assert_fd<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, f, H, 64).unwrap();
    assert!(
        report.passes(REL_TOL),
        "{name}: max rel err {:.3e} (abs {:.3e}) over {} elements",
        report.max_rel_error,
        report.max_abs_error,
        report.checked
    );
}

/// Direct nested-loop cross-correlation.
fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    y
}

/// Direct scatter-add transposed convolution, weight `[Ci, Co, K, K]`.
fn naive_conv_transpose(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, wd] = xs;
    let [_, co, kh, kw] = ws;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut y = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x[((b * ci + ic) * h + iy) * wd + ix];
                    for oc in 0..co {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oy = (iy * stride + i) as isize - pad as isize;
                                let ox = (ix * stride + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                y[((b * co + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w[((ic * co + oc) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(&x), g.leaf(&w));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let expected = naive_conv(x.data(), [1, 2, 5, 5], w.data(), [3, 2, 3, 3], stride, pad);
        let side = (5 + 2 * pad - 3) / stride + 1;
        assert_eq!(g.shape(y), &[1, 3, side, side]);
        for (a, b) in g.value(y).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn centre_tap_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 1, 6, 4]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let wv = g.constant(vec![1, 1, 3, 3], k).unwrap();
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), x.data());
}

#[test]
fn conv_transpose_matches_scatter_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(k, stride, pad) in &[(4, 2, 1), (3, 1, 1), (3, 2, 0), (2, 2, 0)] {
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, k, k]);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(&x), g.leaf(&w));
        let y = g.conv_transpose2d(xv, wv, None, stride, pad).unwrap();
        let expected = naive_conv_transpose(x.data(), [2, 3, 3, 4], w.data(), [3, 2, k, k], stride, pad);
        assert_eq!(g.value(y).len(), expected.len());
        for (a, b) in g.value(y).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn k4_s2_p1_transpose_doubles_2x2() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
    let w = g.constant(vec![1, 1, 4, 4], vec![1.0; 16]).unwrap();
    let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
}

#[test]
fn conv_input_gradient_is_transposed_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6]);
    let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    let gy = rand_tensor(&mut rng, &[1, 3, 3, 3]);

    let mut g = Graph::new();
    let xv = g.input(&x);
    let wv = g.leaf(&w);
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let c = g.leaf(&gy);
    let p = g.mul(y, c).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();

    let mut t = Graph::new();
    let gv = t.leaf(&gy);
    let wv2 = t.leaf(&w);
    let back = t.conv_transpose2d(gv, wv2, None, 2, 1).unwrap();
    for (a, b) in grads.get(xv).unwrap().iter().zip(t.value(back)) {
        assert!((a - b).abs() < 1e-12);
    }

    // stride 1: the same adjoint written as a correlation with the
    // spatially flipped, channel-swapped kernel
    let y1 = {
        let mut g = Graph::new();
        let xv = g.input(&x);
        let w3 = rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[3, 2, 3, 3]);
        let wv = g.leaf(&w3);
        let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
        let gy1 = rand_tensor(&mut ChaCha8Rng::seed_from_u64(10), g.shape(y));
        let c = g.leaf(&gy1);
        let p = g.mul(y, c).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();

        let mut flipped = vec![0.0; 2 * 3 * 9];
        for o in 0..3 {
            for i in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        flipped[((i * 3 + o) * 3 + (2 - a)) * 3 + (2 - b)] = w3.data()[((o * 2 + i) * 3 + a) * 3 + b];
                    }
                }
            }
        }
        let mut t = Graph::new();
        let gv = t.leaf(&gy1);
        let fw = t.constant(vec![2, 3, 3, 3], flipped).unwrap();
        let r = t.conv2d(gv, fw, None, 1, 2).unwrap();
        (grads.get(xv).unwrap().to_vec(), t.value(r).to_vec())
    };
    for (a, b) in y1.0.iter().zip(&y1.1) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Gaussian CDF term via the Maclaurin series of erf, summed to convergence.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-20 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_matches_erf_series() {
    for i in 0..=60 {
        let x = -3.0 + i as f64 * 0.1;
        let mut g = Graph::new();
        let v = g.constant(vec![1], vec![x]).unwrap();
        let y = g.gelu(v);
        let oracle = 0.5 * x * (1.0 + erf_series(x / 2.0_f64.sqrt()));
        assert!((g.item(y) - oracle).abs() < 1e-10, "x={x}");
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_away_from_zero(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let s = Tensor::scalar(1.7);

    assert_fd("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y)
    });
    assert_fd("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y)
    });
    assert_fd("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y)
    });
    assert_fd("div_scalar", &[a.clone(), s.clone()], |g, v| {
        let y = g.div_scalar(v[0], v[1])?;
        weighted_sum(g, y)
    });
    assert_fd("scale", &[a.clone()], |g, v| {
        let y = g.scale(v[0], -2.5);
        weighted_sum(g, y)
    });
    for (name, f) in [
        ("relu", (|g: &mut Graph, v: Var| g.relu(v)) as fn(&mut Graph, Var) -> Var),
        ("leaky_relu", |g, v| g.leaky_relu(v, 0.01)),
        ("gelu", |g, v| g.gelu(v)),
        ("sigmoid", |g, v| g.sigmoid(v)),
        ("exp", |g, v| g.exp(v)),
        ("square", |g, v| g.square(v)),
    ] {
        assert_fd(name, &[a.clone()], |g, v| {
            let y = f(g, v[0]);
            weighted_sum(g, y)
        });
    }
    assert_fd("log", &[pos], |g, v| {
        let y = g.log(v[0]);
        weighted_sum(g, y)
    });
    assert_fd("mean", &[a], |g, v| {
        let sq = g.square(v[0]);
        Ok(g.mean(sq))
    });
}

#[test]
fn linear_algebra_and_shape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let c = rand_tensor(&mut rng, &[2, 4, 3]);
    assert_fd("matmul", &[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y)
    });
    assert_fd("bmm", &[a.clone(), c], |g, v| {
        let y = g.bmm(v[0], v[1])?;
        weighted_sum(g, y)
    });
    assert_fd("permute", &[a.clone()], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        weighted_sum(g, y)
    });
    assert_fd("transpose_last", &[a.clone()], |g, v| {
        let y = g.transpose_last(v[0])?;
        weighted_sum(g, y)
    });
    assert_fd("slice+concat", &[a.clone()], |g, v| {
        let s0 = g.slice(v[0], 2, 0, 1)?;
        let s1 = g.slice(v[0], 2, 2, 2)?;
        let y = g.concat(&[s1, s0, s1], 2)?;
        weighted_sum(g, y)
    });
    assert_fd("reshape", &[a], |g, v| {
        let y = g.reshape(v[0], vec![6, 4])?;
        weighted_sum(g, y)
    });
}

#[test]
fn probability_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let tau = Tensor::scalar(0.7);
    let mask: Vec<bool> = (0..12).map(|i| i % 4 == i / 4).collect();
    assert_fd("softmax", &[a.clone()], |g, v| {
        let y = g.softmax(v[0], None)?;
        weighted_sum(g, y)
    });
    assert_fd("masked softmax with temperature", &[a.clone(), tau], |g, v| {
        let y = g.softmax_with_temperature(v[0], v[1], Some(&mask))?;
        weighted_sum(g, y)
    });
    assert_fd("log_softmax", &[a], |g, v| {
        let y = g.log_softmax(v[0]);
        weighted_sum(g, y)
    });
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = rand_tensor(&mut rng, &[2, 3, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    assert_fd("layer_norm", &[x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(g, y)
    });
    let x = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    assert_fd("batch_norm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm2d(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
        weighted_sum(g, y)
    });
    let (rm, rv) = ([0.1, -0.2], [0.5, 2.0]);
    assert_fd("batch_norm eval", &[x, gamma, beta], |g, v| {
        let (y, _) = g.batch_norm2d(v[0], v[1], v[2], NormStats::Running { mean: &rm, var: &rv }, 1e-5)?;
        weighted_sum(g, y)
    });
}

#[test]
fn spatial_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_fd("conv2d", &[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(g, y)
    });
    let xt = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let wt = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    let bt = rand_tensor(&mut rng, &[2]);
    assert_fd("conv_transpose2d", &[xt, wt, bt], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(g, y)
    });
    let xs = rand_tensor(&mut rng, &[1, 8, 2, 3]);
    assert_fd("pixel_shuffle", &[xs], |g, v| {
        let y = g.pixel_shuffle(v[0], 2)?;
        weighted_sum(g, y)
    });
    assert_fd("pixel_unshuffle", &[x.clone()], |g, v| {
        let c = g.slice(v[0], 2, 0, 4)?;
        let c = g.slice(c, 3, 0, 4)?;
        let y = g.pixel_unshuffle(c, 2)?;
        weighted_sum(g, y)
    });
    let small = rand_tensor(&mut rng, &[1, 2, 2, 2]);
    assert_fd("upsample+avg_pool", &[small], |g, v| {
        let u = g.upsample_nearest(v[0], 4)?;
        let sq = g.square(u);
        let p = g.avg_pool(sq, 2)?;
        weighted_sum(g, p)
    });
}

#[test]
fn composite_chain_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    let w1 = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let w2 = rand_tensor(&mut rng, &[8, 3]);
    assert_fd("conv -> gelu -> matmul -> softmax", &[x, w1, w2], |g, v| {
        let c = g.conv2d(v[0], v[1], None, 2, 1)?; // [2,2,2,2]
        let a = g.gelu(c);
        let f = g.reshape(a, vec![2, 8])?;
        let m = g.matmul(f, v[2])?;
        let s = g.log_softmax(m);
        weighted_sum(g, s)
    });
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let wv = g.input(&w);
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.gelu(y);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        (g.value(y).to_vec(), grads.get(wv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn gather_rejects_out_of_range_index() {
    let mut g = Graph::new();
    let x = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(g.gather(x, Arc::new(vec![0, 5]), vec![2]).is_err());
}

proptest! {
    #[test]
    fn pixel_shuffle_round_trips(n in 1usize..3, c in 1usize..3, h in 1usize..4, w in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, c * r * r, h, w]);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.pixel_shuffle(xv, r).unwrap();
        prop_assert_eq!(g.shape(s), &[n, c, h * r, w * r]);
        let back = g.pixel_unshuffle(s, r).unwrap();
        prop_assert_eq!(g.value(back), x.data());
        let mut sorted_in = x.data().to_vec();
        let mut sorted_out = g.value(s).to_vec();
        sorted_in.sort_by(f64::total_cmp);
        sorted_out.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_in, sorted_out);
    }

    #[test]
    fn softmax_rows_normalize_over_unmasked(rows in 1usize..5, cols in 2usize..7, tau in 0.05f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols]);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.3)).collect();
        for r in 0..rows {
            mask[r * cols + r % cols] = false;
        }
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let t = g.constant(vec![1], vec![tau]).unwrap();
        let y = g.softmax_with_temperature(xv, t, Some(&mask)).unwrap();
        let plain = g.softmax(xv, None).unwrap();
        for r in 0..rows {
            let row = &g.value(y)[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..cols {
                if mask[r * cols + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
                prop_assert!(row[j] >= 0.0);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            let xr = &x.data()[r * cols..(r + 1) * cols];
            let yr = &g.value(plain)[r * cols..(r + 1) * cols];
            prop_assert_eq!(argmax(xr), argmax(yr));
        }
    }

    #[test]
    fn checkpoint_round_trip(values in proptest::collection::vec(any::<f64>(), 1..20), extra in 1usize..4) {
        let mut w = ModelWeights::new();
        w.insert("p", Tensor::from_vec(values.clone()));
        w.insert("q.running_var", Tensor::new(vec![extra, 1], vec![0.5; extra]).unwrap());
        let mut buf = Vec::new();
        w.write_checkpoint(&mut buf).unwrap();
        let back = ModelWeights::read_checkpoint(buf.as_slice()).unwrap();
        let a: Vec<u64> = back.get("p").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        prop_assert_eq!(buf, again);
    }
}
