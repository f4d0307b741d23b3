mod common;

use common::*;
use fed2_core::nn::{
    group_conv_forward, group_norm_forward, read_checkpoint, write_checkpoint, Layer, Mode,
};
use fed2_core::{adapt, Error, LayerDesc, LayerParams, Model, ModelSpec, NormKind, RngStream, Tensor};

/// Direct nested-loop "same" convolution, stride 1, zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f64]) -> Tensor {
    let [b, cin, h, wd] = *x.shape() else { panic!() };
    let [cout, cin_w, k, _] = *w.shape() else { panic!() };
    assert_eq!(cin, cin_w);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; b * cout * h * wd];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * cin + c) * k + ky) * k + kx]
                                    * x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((n * cout + o) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, h, wd], out).unwrap()
}

#[test]
fn identity_dense_model_passes_input_through() {
    let spec = ModelSpec::new(vec![2], vec![], 2);
    let mut model = Model::instantiate(&spec, &mut RngStream::new(0, 1)).unwrap();
    let p = model.layers[0].params_mut().unwrap();
    p.weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    p.bias = Tensor::zeros(&[2]);
    let logits = model.predict(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    assert_eq!(logits.data(), &[1.0, 2.0]);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = RngStream::new(3, 9);
    let x = random_tensor(&[1, 1, 5, 5], &mut rng);
    let w = random_tensor(&[1, 1, 3, 3], &mut rng);
    let bias = [0.25];
    let layer = LayerParams::conv(w.clone(), Tensor::from_vec(bias.to_vec())).unwrap();
    let got = group_conv_forward(&layer, &x).unwrap();
    let want = naive_conv(&x, &w, &bias);
    assert!(got.max_abs_diff(&want) < 1e-12);

    // multi-channel, batched
    let x = random_tensor(&[3, 4, 6, 5], &mut rng);
    let w = random_tensor(&[5, 4, 3, 3], &mut rng);
    let bias: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let layer = LayerParams::conv(w.clone(), Tensor::from_vec(bias.clone())).unwrap();
    let got = group_conv_forward(&layer, &x).unwrap();
    assert!(got.max_abs_diff(&naive_conv(&x, &w, &bias)) < 1e-12);
}

#[test]
fn zeroed_group_outputs_zero() {
    let mut rng = RngStream::new(4, 1);
    let k = 3;
    let (ig, og) = (vec![0..2, 2..4], vec![0..3, 3..6]);
    let mut w: Vec<f64> = (0..2 * 3 * 2 * k * k).map(|_| rng.normal()).collect();
    let half = w.len() / 2;
    w[half..].fill(0.0);
    let layer = LayerParams::group_conv(k, ig, og, w, Tensor::zeros(&[6])).unwrap();
    let x = random_tensor(&[2, 4, 5, 5], &mut rng);
    let y = group_conv_forward(&layer, &x).unwrap();
    for b in 0..2 {
        for c in 3..6 {
            let off = (b * 6 + c) * 25;
            assert!(y.data()[off..off + 25].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn single_group_equals_dense_conv_bitwise() {
    let mut rng = RngStream::new(5, 1);
    let w = random_tensor(&[4, 3, 3, 3], &mut rng);
    let bias = random_tensor(&[4], &mut rng);
    let dense = LayerParams::conv(w.clone(), bias.clone()).unwrap();
    let grouped = LayerParams::group_conv(3, vec![0..3], vec![0..4], w.data().to_vec(), bias).unwrap();
    let x = random_tensor(&[2, 3, 4, 4], &mut rng);
    let a = group_conv_forward(&dense, &x).unwrap();
    let b = group_conv_forward(&grouped, &x).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn two_groups_match_independent_convs_on_slices() {
    let mut rng = RngStream::new(6, 1);
    let (h, wd) = (5, 4);
    // group 0: in 0..2 -> out 0..3, group 1: in 2..5 -> out 3..5 (uneven)
    let w0 = random_tensor(&[3, 2, 3, 3], &mut rng);
    let w1 = random_tensor(&[2, 3, 3, 3], &mut rng);
    let b0 = random_tensor(&[3], &mut rng);
    let b1 = random_tensor(&[2], &mut rng);
    let mut flat = w0.data().to_vec();
    flat.extend_from_slice(w1.data());
    let mut bias = b0.data().to_vec();
    bias.extend_from_slice(b1.data());
    let layer =
        LayerParams::group_conv(3, vec![0..2, 2..5], vec![0..3, 3..5], flat, Tensor::from_vec(bias)).unwrap();
    let x = random_tensor(&[2, 5, h, wd], &mut rng);
    let y = group_conv_forward(&layer, &x).unwrap();

    let slice = |t: &Tensor, chans: std::ops::Range<usize>| {
        let c = t.shape()[1];
        let mut d = Vec::new();
        for b in 0..t.shape()[0] {
            for ch in chans.clone() {
                let off = (b * c + ch) * h * wd;
                d.extend_from_slice(&t.data()[off..off + h * wd]);
            }
        }
        Tensor::new(vec![t.shape()[0], chans.len(), h, wd], d).unwrap()
    };
    let y0 = naive_conv(&slice(&x, 0..2), &w0, b0.data());
    let y1 = naive_conv(&slice(&x, 2..5), &w1, b1.data());
    assert!(slice(&y, 0..3).max_abs_diff(&y0) < 1e-12);
    assert!(slice(&y, 3..5).max_abs_diff(&y1) < 1e-12);
}

#[test]
fn group_conv_rejects_mismatched_channels() {
    let layer = LayerParams::group_conv(3, vec![0..2, 2..4], vec![0..2, 2..4], vec![0.0; 2 * 2 * 2 * 9], Tensor::zeros(&[4]))
        .unwrap();
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    assert!(matches!(group_conv_forward(&layer, &x), Err(Error::Groups { .. })));
    // non-contiguous ranges
    assert!(LayerParams::group_conv(3, vec![0..2, 3..4], vec![0..2, 2..4], vec![0.0; 8 * 9], Tensor::zeros(&[4])).is_err());
}

#[test]
fn group_norm_constant_input_yields_shift() {
    let shift = Tensor::from_vec(vec![0.5, -1.0, 2.0, 3.0]);
    let layer = LayerParams::group_norm_with(vec![0..2, 2..4], Tensor::filled(&[4], 1.7), shift.clone()).unwrap();
    let x = Tensor::filled(&[2, 4, 3, 3], 4.2);
    let y = group_norm_forward(&layer, &x).unwrap();
    for b in 0..2 {
        for c in 0..4 {
            for s in 0..9 {
                assert_eq!(y.data()[(b * 4 + c) * 9 + s], shift.data()[c]);
            }
        }
    }
}

#[test]
fn group_norm_statistics() {
    let mut rng = RngStream::new(8, 1);
    let layer = LayerParams::group_norm(6, 3).unwrap();
    let x = random_tensor(&[3, 6, 4, 4], &mut rng);
    let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 3.0 * v + 5.0).collect()).unwrap();
    let y = group_norm_forward(&layer, &x).unwrap();
    for b in 0..3 {
        for g in 0..3 {
            let off = (b * 6 + 2 * g) * 16;
            let vals = &y.data()[off..off + 32];
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            // eps = 1e-5 shrinks the variance by var/(var+eps); inputs have var ~9
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }
    assert!(LayerParams::group_norm(6, 4).is_err());
}

#[test]
fn single_group_norm_equals_layer_norm() {
    let mut rng = RngStream::new(9, 1);
    let scale = random_tensor(&[5], &mut rng);
    let shift = random_tensor(&[5], &mut rng);
    let layer = LayerParams::group_norm_with(vec![0..5], scale.clone(), shift.clone()).unwrap();
    let x = random_tensor(&[2, 5, 3, 2], &mut rng);
    let y = group_norm_forward(&layer, &x).unwrap();
    // layer norm over all of (C, H, W) per sample
    for b in 0..2 {
        let row = x.row(b);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for c in 0..5 {
            for s in 0..6 {
                let i = c * 6 + s;
                let want = scale.data()[c] * (row[i] - mean) / (var + 1e-5).sqrt() + shift.data()[c];
                assert!((y.row(b)[i] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_weights_give_softmax_bias_gradients() {
    let spec = ModelSpec::new(vec![3], vec![common::dense(4, NormKind::None)], 4);
    let mut model = Model::instantiate(&spec, &mut RngStream::new(1, 1)).unwrap();
    for p in model.param_layers_mut() {
        p.weight.data_mut().fill(0.0);
    }
    let x = Tensor::new(vec![4, 3], vec![0.3; 12]).unwrap();
    let labels = [0, 1, 2, 3];
    let cache = model.forward(&x, Mode::Train).unwrap();
    let (loss, grads) = model.backward(&cache, &labels).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    let logit_layer = model.layers.len() - 1;
    let g = grads.get(logit_layer).unwrap();
    // mean over batch of (softmax(0) - onehot): each class appears once → 0.25 - 0.25
    for (c, v) in g.bias.data().iter().enumerate() {
        let want = (0..4).map(|b| 0.25 - if labels[b] == c { 1.0 } else { 0.0 }).sum::<f64>() / 4.0;
        assert!((v - want).abs() < 1e-15);
    }
    // one-label batch: bias gradient = softmax(0) - onehot
    let cache = model.forward(&x, Mode::Train).unwrap();
    let (_, grads) = model.backward(&cache, &[2, 2, 2, 2]).unwrap();
    let g = grads.get(logit_layer).unwrap();
    assert_eq!(g.bias.data(), &[0.25, 0.25, -0.75, 0.25]);
}

#[test]
fn finite_differences_every_layer_kind() {
    let spec = every_kind_spec();
    let model = Model::instantiate(&spec, &mut RngStream::new(12, 1)).unwrap();
    let mut rng = RngStream::new(12, 2);
    let x = random_tensor(&[3, 2, 6, 6], &mut rng);
    let err = max_fd_error(&model, &x, &[0, 3, 1], 1e-5);
    assert!(err < 1e-4, "worst relative error {err}");
}

#[test]
fn finite_differences_grouped_model() {
    let base = ModelSpec::new(
        vec![2, 4, 4],
        vec![
            conv(4, NormKind::Group { groups: 2 }),
            conv(6, NormKind::Group { groups: 1 }),
            LayerDesc::MaxPool,
            dense(6, NormKind::None),
        ],
        5,
    );
    let spec = adapt(&base, 1, 2).unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(13, 1)).unwrap();
    let x = random_tensor(&[2, 2, 4, 4], &mut RngStream::new(13, 2));
    let err = max_fd_error(&model, &x, &[4, 1], 1e-5);
    assert!(err < 1e-4, "worst relative error {err}");
}

#[test]
fn decoupled_class_gradient_never_leaks() {
    let base = ModelSpec::new(
        vec![1, 4, 4],
        vec![
            conv(6, NormKind::Group { groups: 2 }),
            conv(6, NormKind::Group { groups: 2 }),
            dense(9, NormKind::None),
        ],
        6,
    );
    let spec = adapt(&base, 1, 3).unwrap();
    let assignment = spec.assignment().unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(21, 1)).unwrap();
    let x = random_tensor(&[4, 1, 4, 4], &mut RngStream::new(21, 2));
    let cache = model.forward(&x, Mode::Train).unwrap();
    for c in 0..6 {
        let mut d = vec![0.0; 4 * 6];
        for b in 0..4 {
            d[b * 6 + c] = 1.0;
        }
        let bp = model.backward_from(&cache, &Tensor::new(vec![4, 6], d).unwrap()).unwrap();
        let home = assignment.group_of(c);
        for (li, layer) in model.layers.iter().enumerate() {
            let Layer::Param(p) = layer else { continue };
            if !p.decoupled {
                continue;
            }
            let g = bp.grads.get(li).unwrap();
            for grp in 0..p.out_groups.len() {
                if grp == home {
                    continue;
                }
                let blk = p.weight_block(grp);
                assert!(g.weight.data()[blk].iter().all(|&v| v == 0.0), "class {c} leaks into group {grp}");
                assert!(g.bias.data()[p.out_groups[grp].clone()].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn sgd_step_arithmetic() {
    let spec = ModelSpec::new(vec![1], vec![], 1);
    let mut model = Model::instantiate(&spec, &mut RngStream::new(0, 0)).unwrap();
    model.layers[0].params_mut().unwrap().weight = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let mut grads = fed2_core::GradientSet {
        layers: vec![Some(fed2_core::nn::ParamGrad {
            weight: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        })],
    };
    let before = model.clone();
    model.sgd_step(&grads, 0.0).unwrap();
    assert!(model.bit_eq(&before));
    model.sgd_step(&grads, 0.1).unwrap();
    assert_eq!(model.layers[0].params().unwrap().weight.data(), &[0.8]);

    grads.layers.push(None);
    assert!(model.sgd_step(&grads, 0.1).is_err());
}

#[test]
fn sgd_step_decreases_loss() {
    let spec = ModelSpec::new(vec![4], vec![common::dense(5, NormKind::None)], 3);
    let mut model = Model::instantiate(&spec, &mut RngStream::new(2, 1)).unwrap();
    let x = random_tensor(&[6, 4], &mut RngStream::new(2, 2));
    let labels = [0, 1, 2, 0, 1, 2];
    let cache = model.forward(&x, Mode::Train).unwrap();
    let (before, grads) = model.backward(&cache, &labels).unwrap();
    model.sgd_step(&grads, 0.01).unwrap();
    let after = model.loss(&x, &labels, Mode::Train).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn instantiate_is_deterministic() {
    let spec = every_kind_spec();
    let a = Model::instantiate(&spec, &mut RngStream::new(77, 1)).unwrap();
    let b = Model::instantiate(&spec, &mut RngStream::new(77, 1)).unwrap();
    let c = Model::instantiate(&spec, &mut RngStream::new(78, 1)).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    assert_eq!(a.param_count(), spec.param_count().unwrap());
}

#[test]
fn g1_adapted_model_is_dense_everywhere() {
    let base = every_kind_spec();
    let spec = adapt(&base, 0, 1).unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(1, 1)).unwrap();
    for p in model.param_layers() {
        assert_eq!(p.in_groups.len(), 1);
        assert_eq!(p.out_groups.len(), 1);
    }
    assert_eq!(model.param_count(), base.param_count().unwrap());
}

#[test]
fn shape_errors_name_the_layer() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(1, 1)).unwrap();
    match model.forward(&Tensor::zeros(&[1, 3, 6, 6]), Mode::Eval) {
        Err(Error::Shape { layer, expected, actual }) => {
            assert_eq!(layer, "input");
            assert_eq!(expected, vec![1, 2, 6, 6]);
            assert_eq!(actual, vec![1, 3, 6, 6]);
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn stale_cache_is_rejected() {
    let mut model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(1, 1)).unwrap();
    let x = random_tensor(&[2, 2, 6, 6], &mut RngStream::new(1, 2));
    let cache = model.forward(&x, Mode::Train).unwrap();
    let (_, grads) = model.backward(&cache, &[0, 1]).unwrap();
    model.sgd_step(&grads, 0.1).unwrap();
    assert!(matches!(model.backward(&cache, &[0, 1]), Err(Error::StaleCache)));
    let cache = model.forward(&x, Mode::Train).unwrap();
    assert!(model.backward(&cache, &[0]).is_err());
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let base = every_kind_spec();
    let spec = adapt(&base, 2, 2).unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(31, 1)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..8], b"FED2CKPT");
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert!(back.bit_eq(&model));

    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice()).is_err());
}

/// Byte length of the checkpoint record starting at `at`.
fn record_len(buf: &[u8], at: usize) -> usize {
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap()) as usize;
    let mut i = at + 4 + 1 + 1;
    let ndim = u32_at(i);
    i += 4 + 8 * ndim;
    let ngroups = u32_at(i);
    i += 4 + 16 * ngroups;
    let len = u64_at(i);
    i + 8 + 8 * len - at
}

#[test]
fn checkpoint_rejects_duplicate_records() {
    let spec = ModelSpec::new(vec![3], vec![], 2);
    let model = Model::instantiate(&spec, &mut RngStream::new(32, 1)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let spec_len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let first = 20 + spec_len + 4;
    let weight = buf[first..first + record_len(&buf, first)].to_vec();
    // same record count, but the weight appears twice and the bias never
    let mut dup = buf[..first].to_vec();
    dup.extend(&weight);
    dup.extend(&weight);
    let err = read_checkpoint(dup.as_slice()).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn outputs_stay_finite() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(41, 1)).unwrap();
    // constant input drives every norm layer through its zero-variance guard
    let cache = model.forward(&Tensor::filled(&[2, 2, 6, 6], 1.0), Mode::Train).unwrap();
    assert!(cache.logits().is_finite());
    let (loss, grads) = model.backward(&cache, &[0, 1]).unwrap();
    assert!(loss.is_finite());
    for g in grads.layers.iter().flatten() {
        assert!(g.weight.is_finite() && g.bias.is_finite());
    }
}
