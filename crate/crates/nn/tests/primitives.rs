use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sissa_nn::functional::{lstm_cell, residual_add, rnn_cell, scaled_dot_attention, QkvWeights};
use sissa_nn::layers::{BatchNorm2d, Lstm, ResidualAttention, Rnn};
use sissa_nn::tape::BnMode;
use sissa_nn::{
    apply_bn_updates, grad_check, Adam, Conv2dSpec, Forward, GradCheckOptions, Init, NnError, ParamId, ParamStore,
    Scalar, Tape, Tensor, Var,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn add_param(store: &mut ParamStore, name: &str, t: Tensor) -> ParamId {
    let id = store.add(name, t.shape(), Init::Constant { value: 0.0 }, &mut rng(0));
    store.param_mut(id).value = t;
    id
}

/// Finite-difference settings for the 1e-4 per-primitive checks. On 32-bit
/// floats a wide extrapolated step keeps both cancellation and truncation
/// error below the tolerance.
fn precise() -> GradCheckOptions {
    let mut o = GradCheckOptions::default();
    if !cfg!(feature = "f64") {
        o.tolerance = 1e-4;
        o.step = 2e-2;
        o.richardson = true;
    }
    o
}

/// `sum(y * r)` for a fixed random `r`, so every output entry gets a distinct weight.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let r = random(tape.shape(y), &mut rng(seed));
    let r = tape.input(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

fn assert_close(a: &[Scalar], b: &[Scalar], tol: Scalar) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ---- affine ----

#[test]
fn affine_with_identity_weight_is_identity() {
    let mut t = Tape::new();
    let x = t.input(random(&[3, 4], &mut rng(1)));
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let w = t.input(eye);
    let b = t.input(Tensor::zeros(&[4]));
    let y = t.affine(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn affine_hand_arithmetic() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let w = t.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = t.input(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let y = t.affine(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[4.0, 6.0]);
}

#[test]
fn affine_broadcasts_over_leading_extents() {
    let mut r = rng(2);
    let mut t = Tape::new();
    let x = t.input(random(&[2, 3, 4], &mut r));
    let w = t.input(random(&[4, 5], &mut r));
    let b = t.input(random(&[5], &mut r));
    let y = t.affine(x, w, Some(b)).unwrap();
    assert_eq!(t.shape(y), &[2, 3, 5]);
    let (xv, wv, bv, yv) = (t.value(x).data(), t.value(w).data(), t.value(b).data(), t.value(y).data());
    for row in 0..6 {
        for o in 0..5 {
            let mut acc = bv[o];
            for i in 0..4 {
                acc += xv[row * 4 + i] * wv[i * 5 + o];
            }
            assert!((acc - yv[row * 5 + o]).abs() < 1e-5);
        }
    }
}

#[test]
fn affine_rejects_nonconforming_shapes() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[2, 3]));
    let w = t.input(Tensor::zeros(&[4, 2]));
    assert!(matches!(t.affine(x, w, None), Err(NnError::ShapeMismatch { .. })));
    let w = t.input(Tensor::zeros(&[3, 2]));
    let b = t.input(Tensor::zeros(&[3]));
    assert!(matches!(t.affine(x, w, Some(b)), Err(NnError::ShapeMismatch { .. })));
}

#[test]
fn affine_sum_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let w = add_param(&mut store, "w", random(&[4, 3], &mut r));
    let b = add_param(&mut store, "b", random(&[3], &mut r));
    let x = random(&[5, 4], &mut r);
    let report = grad_check(&store, &precise(), |f: &mut Forward| {
        let xv = f.tape.input(x.clone());
        let (wv, bv) = (f.param(w), f.param(b));
        let y = f.tape.affine(xv, wv, Some(bv))?;
        Ok(f.tape.sum(y))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_error < 1e-4);
    assert_eq!(report.checked, 15);
}

// ---- convolution, pooling, batch norm ----

fn conv_reference(x: &Tensor, w: &Tensor, b: &[Scalar], stride: usize, pad: usize) -> Tensor {
    let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bn * o * oh * ow];
    for n in 0..bn {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (si, sj) = ((i * stride + ki) as isize - pad as isize, (j * stride + kj) as isize - pad as isize);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * c + ic) * h + si as usize) * wd + sj as usize];
                                acc += xv * w.data()[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[bn, o, oh, ow], out).unwrap()
}

#[test]
fn unit_kernel_convolution_is_identity() {
    let mut t = Tape::new();
    let x = t.input(random(&[1, 1, 5, 5], &mut rng(4)));
    let w = t.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = t.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 0 }).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn convolution_matches_nested_loop_reference() {
    let mut r = rng(5);
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5)] {
        let x = random(&[1, 1, 8, 8], &mut r);
        let w = random(&[3, 1, k, k], &mut r);
        let b = random(&[3], &mut r);
        let expected = conv_reference(&x, &w, b.data(), stride, pad);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.input(x), t.input(w), t.input(b));
        let y = t.conv2d(xv, wv, Some(bv), Conv2dSpec { stride, padding: pad }).unwrap();
        assert_eq!(t.shape(y), expected.shape());
        assert_close(t.value(y).data(), expected.data(), 1e-5);
    }
}

#[test]
fn multichannel_batched_convolution_matches_reference() {
    let mut r = rng(6);
    let x = random(&[2, 3, 6, 7], &mut r);
    let w = random(&[4, 3, 3, 3], &mut r);
    let b = random(&[4], &mut r);
    let expected = conv_reference(&x, &w, b.data(), 1, 1);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.input(x), t.input(w), t.input(b));
    let y = t.conv2d(xv, wv, Some(bv), Conv2dSpec { stride: 1, padding: 1 }).unwrap();
    assert_close(t.value(y).data(), expected.data(), 1e-5);
}

#[test]
fn convolution_rejects_kernel_larger_than_padded_input() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[1, 1, 2, 2]));
    let w = t.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(t.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 1 }).is_err());
    let w = t.input(Tensor::zeros(&[1, 2, 1, 1]));
    assert!(t.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 0 }).is_err());
}

#[test]
fn maxpool_of_constant_is_constant() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[2, 3, 6, 6], 0.7));
    let y = t.maxpool2d(x, 2).unwrap();
    assert_eq!(t.shape(y), &[2, 3, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn maxpool_takes_window_maxima() {
    let mut t = Tape::new();
    let data: Vec<Scalar> = (0..16).map(|v| ((v * 7) % 16) as Scalar).collect();
    let x = t.input(Tensor::new(&[1, 1, 4, 4], data.clone()).unwrap());
    let y = t.maxpool2d(x, 2).unwrap();
    let mut expected = vec![];
    for bi in 0..2 {
        for bj in 0..2 {
            let m = [0, 1, 4, 5].iter().map(|o| data[bi * 8 + bj * 2 + o]).fold(Scalar::MIN, Scalar::max);
            expected.push(m);
        }
    }
    assert_eq!(t.value(y).data(), expected.as_slice());
}

#[test]
fn maxpool_rejects_window_larger_than_input() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[1, 1, 1, 4]));
    assert!(t.maxpool2d(x, 2).is_err());
}

#[test]
fn batchnorm_training_normalizes_per_channel() {
    let mut r = rng(7);
    let mut t = Tape::new();
    let mut x = random(&[4, 2, 3, 3], &mut r);
    for v in x.data_mut().iter_mut() {
        *v = *v * 3.0 + 5.0;
    }
    let xv = t.input(x);
    let g = t.input(Tensor::full(&[2], 1.0));
    let b = t.input(Tensor::zeros(&[2]));
    let (y, stats) = t.batchnorm(xv, g, b, BnMode::Train).unwrap();
    assert!(stats.is_some());
    let yv = t.value(y).data();
    for c in 0..2 {
        let vals: Vec<Scalar> = (0..4).flat_map(|n| (0..9).map(move |p| (n, p))).map(|(n, p)| yv[(n * 2 + c) * 9 + p]).collect();
        let mean = vals.iter().sum::<Scalar>() / vals.len() as Scalar;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / vals.len() as Scalar;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_inference_ignores_batch_composition() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2, &mut r);
    // move running stats away from the defaults
    for _ in 0..5 {
        let x = random(&[3, 2, 2, 2], &mut r);
        let mut f = Forward::new(&store, true);
        let xv = f.tape.input(x);
        bn.forward(&mut f, xv).unwrap();
        let (_, updates) = f.finish();
        apply_bn_updates(&mut store, &updates);
    }
    let sample = random(&[1, 2, 2, 2], &mut r);
    let run = |batch: Tensor| {
        let mut f = Forward::new(&store, false);
        let xv = f.tape.input(batch);
        let y = bn.forward(&mut f, xv).unwrap();
        f.tape.value(y).data()[..8].to_vec()
    };
    let alone = run(sample.clone());
    let mut joined = sample.data().to_vec();
    joined.extend(random(&[2, 2, 2, 2], &mut r).into_data());
    let with_others = run(Tensor::new(&[3, 2, 2, 2], joined).unwrap());
    assert_eq!(alone, with_others);
}

#[test]
fn running_statistics_follow_momentum_update() {
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 1, &mut rng(0));
    let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let mut f = Forward::new(&store, true);
    let xv = f.tape.input(x);
    bn.forward(&mut f, xv).unwrap();
    let (_, updates) = f.finish();
    apply_bn_updates(&mut store, &updates);
    // batch mean 4, biased var 5
    assert!((store.buffer(bn.running_mean).data()[0] - 0.4).abs() < 1e-6);
    let v = store.buffer(bn.running_var).data()[0];
    assert!((v - (0.9 + 0.1 * 5.0)).abs() < 1e-5 || (v - (0.9 + 0.1 * 5.0 * 4.0 / 3.0)).abs() < 1e-5);
}

#[test]
fn conv_pool_batchnorm_gradients_match_finite_differences() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let w = add_param(&mut store, "w", random(&[2, 1, 3, 3], &mut r));
    let b = add_param(&mut store, "b", random(&[2], &mut r));
    let g = add_param(&mut store, "gamma", random(&[2], &mut r));
    let be = add_param(&mut store, "beta", random(&[2], &mut r));
    let x = random(&[2, 1, 6, 6], &mut r);
    let report = grad_check(&store, &GradCheckOptions::default(), |f: &mut Forward| {
        let xv = f.tape.input(x.clone());
        let (wv, bv, gv, bev) = (f.param(w), f.param(b), f.param(g), f.param(be));
        let c = f.tape.conv2d(xv, wv, Some(bv), Conv2dSpec { stride: 1, padding: 1 })?;
        let (n, _) = f.tape.batchnorm(c, gv, bev, BnMode::Train)?;
        let t = f.tape.tanh(n);
        Ok(weighted_sum(&mut f.tape, t, 10))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn maxpool_gradient_matches_finite_differences_away_from_ties() {
    let mut store = ParamStore::new();
    // distinct values spaced wider than twice the step
    let perm: Vec<Scalar> = (0..36).map(|v| ((v * 11) % 36) as Scalar * 0.05).collect();
    let x = add_param(&mut store, "x", Tensor::new(&[1, 1, 6, 6], perm).unwrap());
    let report = grad_check(&store, &GradCheckOptions::default(), |f: &mut Forward| {
        let xv = f.param(x);
        let p = f.tape.maxpool2d(xv, 2)?;
        Ok(weighted_sum(&mut f.tape, p, 11))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

// ---- recurrent cells ----

#[test]
fn rnn_cell_with_zero_weights_outputs_zero() {
    let mut t = Tape::new();
    let h = t.input(random(&[2, 4], &mut rng(12)));
    let x = t.input(random(&[2, 3], &mut rng(13)));
    let wx = t.input(Tensor::zeros(&[3, 4]));
    let wh = t.input(Tensor::zeros(&[4, 4]));
    let b = t.input(Tensor::zeros(&[4]));
    let y = rnn_cell(&mut t, h, x, wx, wh, b).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn rnn_cell_matches_formula_and_is_bounded() {
    let mut r = rng(14);
    let (hp, xt, wxv, whv, bv) =
        (random(&[1, 3], &mut r), random(&[1, 2], &mut r), random(&[2, 3], &mut r), random(&[3, 3], &mut r), random(&[3], &mut r));
    let mut t = Tape::new();
    let (h, x, wx, wh, b) = (t.input(hp.clone()), t.input(xt.clone()), t.input(wxv.clone()), t.input(whv.clone()), t.input(bv.clone()));
    let y = rnn_cell(&mut t, h, x, wx, wh, b).unwrap();
    for j in 0..3 {
        let mut pre = bv.data()[j];
        for i in 0..2 {
            pre += xt.data()[i] * wxv.data()[i * 3 + j];
        }
        for i in 0..3 {
            pre += hp.data()[i] * whv.data()[i * 3 + j];
        }
        let out = t.value(y).data()[j];
        assert!((out - pre.tanh()).abs() < 1e-6);
        assert!(out.abs() < 1.0);
    }
    let mut t2 = Tape::new();
    let bad = t2.input(Tensor::zeros(&[1, 5]));
    let (x, wx, wh, b) = (t2.input(xt), t2.input(wxv), t2.input(whv), t2.input(bv));
    assert!(rnn_cell(&mut t2, bad, x, wx, wh, b).is_err());
}

#[test]
fn rnn_unroll_gradient_matches_finite_differences() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let rnn = Rnn::new(&mut store, "rnn", 3, 4, &mut r);
    let x = random(&[2, 5, 3], &mut r);
    let report = grad_check(&store, &precise(), |f: &mut Forward| {
        let xv = f.tape.input(x.clone());
        let y = rnn.forward(f, xv)?;
        Ok(weighted_sum(&mut f.tape, y, 16))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn lstm_fixture(bias: Tensor, seed: u64) -> (Tape, Var, Var, Var, Tensor) {
    let mut r = rng(seed);
    let mut t = Tape::new();
    let h = t.input(random(&[2, 3], &mut r));
    let c_prev = random(&[2, 3], &mut r);
    let c = t.input(c_prev.clone());
    let x = t.input(random(&[2, 4], &mut r));
    let wx = t.input(random(&[4, 12], &mut r));
    let wh = t.input(random(&[3, 12], &mut r));
    let b = t.input(bias);
    let (ht, ct) = lstm_cell(&mut t, h, c, x, wx, wh, b).unwrap();
    (t, ht, ct, c, c_prev)
}

#[test]
fn saturated_forget_and_closed_input_gate_preserve_cell_state() {
    let mut bias = vec![0.0; 12];
    bias[..3].fill(20.0);
    bias[3..6].fill(-20.0);
    let (t, _, ct, _, c_prev) = lstm_fixture(Tensor::new(&[12], bias).unwrap(), 17);
    assert_close(t.value(ct).data(), c_prev.data(), 1e-3);
}

#[test]
fn lstm_hidden_state_is_strictly_bounded() {
    let mut r = rng(18);
    for seed in 0..20 {
        let (t, ht, _, _, _) = lstm_fixture(random(&[12], &mut r), seed);
        assert!(t.value(ht).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn lstm_cell_matches_gate_equations() {
    let (t, ht, ct, c, _) = lstm_fixture(Tensor::zeros(&[12]), 19);
    assert_eq!(t.shape(c), &[2, 3]);
    // same draws as the fixture
    let mut r = rng(19);
    let (h, cp, x, wx, wh) =
        (random(&[2, 3], &mut r), random(&[2, 3], &mut r), random(&[2, 4], &mut r), random(&[4, 12], &mut r), random(&[3, 12], &mut r));
    let sig = |v: Scalar| 1.0 / (1.0 + (-v).exp());
    for n in 0..2 {
        let pre: Vec<Scalar> = (0..12)
            .map(|j| {
                (0..4).map(|i| x.data()[n * 4 + i] * wx.data()[i * 12 + j]).sum::<Scalar>()
                    + (0..3).map(|i| h.data()[n * 3 + i] * wh.data()[i * 12 + j]).sum::<Scalar>()
            })
            .collect();
        for k in 0..3 {
            let (f, i, cc, o) = (sig(pre[k]), sig(pre[3 + k]), pre[6 + k].tanh(), sig(pre[9 + k]));
            let c_new = f * cp.data()[n * 3 + k] + i * cc;
            assert!((t.value(ct).data()[n * 3 + k] - c_new).abs() < 1e-5);
            assert!((t.value(ht).data()[n * 3 + k] - o * c_new.tanh()).abs() < 1e-5);
        }
    }
}

#[test]
fn lstm_unroll_gradient_matches_finite_differences() {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut r);
    let x = random(&[2, 5, 3], &mut r);
    let report = grad_check(&store, &precise(), |f: &mut Forward| {
        let xv = f.tape.input(x.clone());
        let y = lstm.forward(f, xv)?;
        Ok(weighted_sum(&mut f.tape, y, 21))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

// ---- attention and residual ----

fn qkv(t: &mut Tape, d: usize, r: &mut ChaCha8Rng) -> QkvWeights {
    QkvWeights {
        wq: t.input(random(&[d, d], r)),
        bq: t.input(random(&[d], r)),
        wk: t.input(random(&[d, d], r)),
        bk: t.input(random(&[d], r)),
        wv: t.input(random(&[d, d], r)),
        bv: t.input(random(&[d], r)),
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(22);
    let mut t = Tape::new();
    let x = t.input(random(&[3, 6, 4], &mut r));
    let w = qkv(&mut t, 4, &mut r);
    let (out, weights) = scaled_dot_attention(&mut t, x, &w).unwrap();
    assert_eq!(t.shape(out), &[3, 6, 4]);
    assert_eq!(t.shape(weights), &[3, 6, 6]);
    for row in t.value(weights).data().chunks(6) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<Scalar>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn single_token_attention_returns_value_row() {
    let mut r = rng(23);
    let mut t = Tape::new();
    let xt = random(&[1, 5], &mut r);
    let x = t.input(xt.clone());
    let w = qkv(&mut t, 5, &mut r);
    let (out, weights) = scaled_dot_attention(&mut t, x, &w).unwrap();
    assert_eq!(t.value(weights).data(), &[1.0]);
    let (wv, bv) = (t.value(w.wv).data(), t.value(w.bv).data());
    let v: Vec<Scalar> = (0..5).map(|j| bv[j] + (0..5).map(|i| xt.data()[i] * wv[i * 5 + j]).sum::<Scalar>()).collect();
    assert_eq!(t.shape(out), &[1, 5]);
    assert_close(t.value(out).data(), &v, 1e-6);
}

#[test]
fn attention_rejects_mismatched_projection() {
    let mut r = rng(24);
    let mut t = Tape::new();
    let x = t.input(random(&[4, 3], &mut r));
    let w = qkv(&mut t, 5, &mut r);
    assert!(scaled_dot_attention(&mut t, x, &w).is_err());
}

#[test]
fn attention_gradient_wrt_input_matches_finite_differences() {
    let mut r = rng(25);
    let mut store = ParamStore::new();
    let x = add_param(&mut store, "x", random(&[2, 4, 3], &mut r));
    let mut wr = rng(26);
    let proj: Vec<Tensor> = (0..6).map(|i| random(if i % 2 == 0 { &[3, 3] } else { &[3] }, &mut wr)).collect();
    let report = grad_check(&store, &precise(), |f: &mut Forward| {
        let xv = f.param(x);
        let v: Vec<Var> = proj.iter().map(|p| f.tape.input(p.clone())).collect();
        let w = QkvWeights { wq: v[0], bq: v[1], wk: v[2], bk: v[3], wv: v[4], bv: v[5] };
        let (out, _) = scaled_dot_attention(&mut f.tape, xv, &w)?;
        Ok(weighted_sum(&mut f.tape, out, 27))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn residual_with_zero_branch_is_identity() {
    let mut t = Tape::new();
    let x = t.input(random(&[3, 4], &mut rng(28)));
    let z = t.input(Tensor::zeros(&[3, 4]));
    let y = residual_add(&mut t, x, z).unwrap();
    assert_eq!(t.value(y), t.value(x));
    let bad = t.input(Tensor::zeros(&[4, 3]));
    assert!(residual_add(&mut t, x, bad).is_err());
}

#[test]
fn residual_shifts_with_input_offset() {
    let mut r = rng(29);
    let (xt, ft) = (random(&[2, 3], &mut r), random(&[2, 3], &mut r));
    let c = 0.75;
    let mut t = Tape::new();
    let (x, fx) = (t.input(xt.clone()), t.input(ft));
    let y = residual_add(&mut t, x, fx).unwrap();
    let shifted = t.input(Tensor::new(&[2, 3], xt.data().iter().map(|v| v + c).collect()).unwrap());
    let y2 = residual_add(&mut t, shifted, fx).unwrap();
    let expected: Vec<Scalar> = t.value(y).data().iter().map(|v| v + c).collect();
    assert_close(t.value(y2).data(), &expected, 1e-6);
}

#[test]
fn residual_gradient_flows_through_both_branches() {
    let mut r = rng(30);
    let mut store = ParamStore::new();
    let att = ResidualAttention::new(&mut store, "att", 3, false, &mut r);
    let x = add_param(&mut store, "x", random(&[1, 4, 3], &mut r));
    // identity term alone: with zero value projection dy/dx == upstream gradient
    let mut zero_store = store.clone();
    for id in [att.v.w, att.v.b] {
        zero_store.param_mut(id).value.data_mut().fill(0.0);
    }
    let upstream = random(&[1, 4, 3], &mut rng(31));
    let grads = |s: &ParamStore| {
        let mut f = Forward::new(s, true);
        let xv = f.param(x);
        let y = att.forward(&mut f, xv).unwrap();
        let u = f.tape.input(upstream.clone());
        let p = f.tape.mul(y, u).unwrap();
        let loss = f.tape.sum(p);
        let g = f.tape.backward(loss).unwrap();
        g.get(xv).unwrap().to_vec()
    };
    assert_close(&grads(&zero_store), upstream.data(), 1e-6);
    let full = grads(&store);
    assert!(full.iter().zip(upstream.data()).any(|(a, b)| (a - b).abs() > 1e-3));
    let report = grad_check(&store, &precise(), |f: &mut Forward| {
        let xv = f.param(x);
        let y = att.forward(f, xv)?;
        Ok(weighted_sum(&mut f.tape, y, 31))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_value_attention_block_is_identity() {
    let mut r = rng(32);
    let mut store = ParamStore::new();
    let att = ResidualAttention::new(&mut store, "att", 5, true, &mut r);
    let mut f = Forward::new(&store, false);
    let x = f.tape.input(random(&[2, 7, 5], &mut r));
    let y = att.forward(&mut f, x).unwrap();
    assert_eq!(f.tape.value(y), f.tape.value(x));
}

// ---- loss and optimizer ----

#[test]
fn uniform_logits_give_log_class_count() {
    let mut t = Tape::new();
    let logits = t.input(Tensor::full(&[4, 7], 0.3));
    let loss = t.cross_entropy(logits, &[0, 3, 6, 2]).unwrap();
    assert!((t.value(loss).item() - (7.0 as Scalar).ln()).abs() < 1e-6);
    assert!((t.value(loss).item() - 1.9459).abs() < 1e-4);
}

#[test]
fn confident_correct_logit_drives_loss_to_zero() {
    let mut t = Tape::new();
    let mut l = Tensor::zeros(&[1, 7]);
    l.data_mut()[4] = 1000.0;
    let logits = t.input(l);
    let loss = t.cross_entropy(logits, &[4]).unwrap();
    assert!(t.value(loss).item().abs() < 1e-6);
    assert!(t.value(loss).is_finite());
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut t = Tape::new();
    let logits = t.input(Tensor::zeros(&[2, 7]));
    assert!(matches!(t.cross_entropy(logits, &[1, 7]), Err(NnError::LabelRange { label: 7, classes: 7 })));
    assert!(t.cross_entropy(logits, &[1]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(33);
    let mut store = ParamStore::new();
    let l = add_param(&mut store, "logits", random(&[3, 7], &mut r));
    let report = grad_check(&store, &precise(), |f: &mut Forward| {
        let lv = f.param(l);
        f.tape.cross_entropy(lv, &[0, 5, 6])
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn adam_separates_linearly_separable_toy_set() {
    let mut r = rng(34);
    // two clusters on either side of x0 + 0.5 x1 = 0
    let (x, y): (Vec<[Scalar; 2]>, Vec<usize>) = (0..64)
        .map(|i| {
            let label = i % 2;
            let centre: Scalar = if label == 1 { 0.8 } else { -0.8 };
            let p: [Scalar; 2] = [centre + r.gen_range(-0.5..0.5), centre + r.gen_range(-0.5..0.5)];
            (p, label)
        })
        .unzip();
    let xt = Tensor::new(&[x.len(), 2], x.iter().flatten().copied().collect()).unwrap();
    let mut store = ParamStore::new();
    let lin = sissa_nn::layers::Linear::new(&mut store, "lin", 2, 2, &mut r);
    let mut opt = Adam::new(&store, 1e-2);
    let logits_of = |s: &ParamStore| {
        let mut f = Forward::new(s, false);
        let xv = f.tape.input(xt.clone());
        let l = lin.forward(&mut f, xv).unwrap();
        f.tape.value(l).clone()
    };
    for _ in 0..200 {
        store.zero_grads();
        let mut f = Forward::new(&store, true);
        let xv = f.tape.input(xt.clone());
        let l = lin.forward(&mut f, xv).unwrap();
        let loss = f.tape.cross_entropy(l, &y).unwrap();
        let g = f.tape.backward(loss).unwrap();
        let (tape, _) = f.finish();
        tape.accumulate_param_grads(&g, &mut store);
        opt.step(&mut store);
    }
    assert_eq!(opt.steps_taken(), 200);
    let logits = logits_of(&store);
    let correct = logits.data().chunks(2).zip(&y).filter(|(row, &label)| usize::from(row[1] > row[0]) == label).count();
    assert_eq!(correct, y.len());
}

// ---- gradient check itself ----

#[test]
fn corrupted_gradient_is_flagged() {
    let mut r = rng(35);
    let mut store = ParamStore::new();
    let w = add_param(&mut store, "w", random(&[3, 2], &mut r));
    let x = random(&[4, 3], &mut r);
    let mut loss = |f: &mut Forward| {
        let xv = f.tape.input(x.clone());
        let wv = f.param(w);
        let y = f.tape.affine(xv, wv, None)?;
        let y = f.tape.tanh(y);
        Ok(f.tape.sum(y))
    };
    let opts = precise();
    let mut analytic = sissa_nn::gradcheck::analytic_gradients(&store, true, &mut loss).unwrap();
    let clean = sissa_nn::gradcheck::compare_with_numeric(&store, &analytic, &opts, &mut loss).unwrap();
    assert!(clean.passed, "{clean:?}");
    analytic[0][4] += 0.5;
    let bad = sissa_nn::gradcheck::compare_with_numeric(&store, &analytic, &opts, &mut loss).unwrap();
    assert!(!bad.passed);
    assert_eq!(bad.worst, Some(("w".to_string(), 4)));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(NnError::NonScalarLoss(_))));
}
