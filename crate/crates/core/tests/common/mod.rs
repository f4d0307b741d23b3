#![allow(dead_code)]

use fed2_core::nn::Mode;
use fed2_core::rng::streams;
use fed2_core::{LayerDesc, Model, ModelSpec, NormKind, RngStream, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn conv(channels: usize, norm: NormKind) -> LayerDesc {
    LayerDesc::Conv {
        channels,
        kernel: 3,
        norm,
        relu: true,
    }
}

pub fn dense(units: usize, norm: NormKind) -> LayerDesc {
    LayerDesc::Dense {
        units,
        norm,
        relu: true,
    }
}

/// Small CNN touching every layer kind: conv, group norm, batch norm,
/// relu, max pool, flatten, dense.
pub fn every_kind_spec() -> ModelSpec {
    ModelSpec::new(
        vec![2, 6, 6],
        vec![
            conv(4, NormKind::Group { groups: 2 }),
            LayerDesc::MaxPool,
            conv(6, NormKind::Batch),
            dense(8, NormKind::None),
        ],
        4,
    )
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare by absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite-difference check of every trainable parameter.
/// Returns the worst relative error.
pub fn max_fd_error(model: &Model, x: &Tensor, labels: &[usize], eps: f64) -> f64 {
    let cache = model.forward(x, Mode::Train).unwrap();
    let (_, grads) = model.backward(&cache, labels).unwrap();
    let mut worst: f64 = 0.0;
    for (li, layer) in model.layers.iter().enumerate() {
        let Some(p) = layer.params() else { continue };
        let g = grads.get(li).unwrap();
        for (role, len) in [(0, p.weight.len()), (1, p.bias.len())] {
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let q = m.layers[li].params_mut().unwrap();
                    let t = if role == 0 { &mut q.weight } else { &mut q.bias };
                    t.data_mut()[j] += delta;
                    m.loss(x, labels, Mode::Train).unwrap()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = if role == 0 { g.weight.data()[j] } else { g.bias.data()[j] };
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    worst
}

/// A model with every parameter and running statistic drawn at random.
pub fn random_model(spec: &ModelSpec, seed: u64) -> Model {
    let mut m = Model::instantiate(spec, &mut RngStream::new(seed, streams::INIT)).unwrap();
    let mut rng = RngStream::new(seed, 900);
    for p in m.param_layers_mut() {
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v = rng.normal();
        }
        if let Some(r) = p.running.as_mut() {
            r.mean.data_mut().iter_mut().for_each(|v| *v = rng.normal());
            r.var.data_mut().iter_mut().for_each(|v| *v = rng.uniform() + 0.1);
        }
    }
    m
}

/// Every exchanged scalar of a model, layer by layer, as (layer, slot, values).
pub fn flat(m: &Model) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for p in m.param_layers() {
        out.push(p.weight.data().to_vec());
        out.push(p.bias.data().to_vec());
        if let Some(r) = &p.running {
            out.push(r.mean.data().to_vec());
            out.push(r.var.data().to_vec());
        }
    }
    out
}

/// Group `g`'s slice of every decoupled tensor, in `flat` order, `None` for shared slots.
pub fn group_slices(m: &Model, g: usize) -> Vec<Option<Vec<f64>>> {
    let mut out = Vec::new();
    for p in m.param_layers() {
        let (w, o) = if p.decoupled { (p.weight_block(g), p.out_groups[g].clone()) } else { (0..0, 0..0) };
        let pick = |t: &[f64], r: std::ops::Range<usize>| p.decoupled.then(|| t[r].to_vec());
        out.push(pick(p.weight.data(), w));
        out.push(pick(p.bias.data(), o.clone()));
        if let Some(r) = &p.running {
            out.push(pick(r.mean.data(), o.clone()));
            out.push(pick(r.var.data(), o));
        }
    }
    out
}
