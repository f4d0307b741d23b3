use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, DenseGeom, NormCache};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::spec::{ModelSpec, OpPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    GroupedDense,
    Conv,
    GroupConv,
    GroupNorm,
    BatchNorm,
}

impl LayerKind {
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            LayerKind::Dense | LayerKind::GroupedDense | LayerKind::Conv | LayerKind::GroupConv
        )
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::GroupConv)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, LayerKind::GroupNorm | LayerKind::BatchNorm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::GroupedDense => "grouped_dense",
            LayerKind::Conv => "conv",
            LayerKind::GroupConv => "group_conv",
            LayerKind::GroupNorm => "group_norm",
            LayerKind::BatchNorm => "batch_norm",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::GroupedDense => 1,
            LayerKind::Conv => 2,
            LayerKind::GroupConv => 3,
            LayerKind::GroupNorm => 4,
            LayerKind::BatchNorm => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Dense,
            1 => LayerKind::GroupedDense,
            2 => LayerKind::Conv,
            3 => LayerKind::GroupConv,
            4 => LayerKind::GroupNorm,
            5 => LayerKind::BatchNorm,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Parameters of one weighted or normalization layer.
///
/// For weighted layers `weight` is stored group-block-major (see
/// [`LayerParams::weight_block`]); when every group has the same input
/// width its shape reads `[out, in_per_group, k, k]` (conv) or
/// `[out, in_per_group]` (dense), otherwise it is flat. For norm layers
/// `weight`/`bias` are the per-channel scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer_index: usize,
    /// Index among weighted layers, `None` for norm layers.
    pub weighted_index: Option<usize>,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Compute groups over input channels (features for dense layers).
    pub in_groups: Vec<Range<usize>>,
    /// Compute groups over output channels; a single full range when shared.
    pub out_groups: Vec<Range<usize>>,
    /// Normalization groups (group norm only).
    pub norm_groups: Vec<Range<usize>>,
    /// True inside the grouped region; its `out_groups` are then structural.
    pub decoupled: bool,
    pub running: Option<RunningStats>,
}

impl LayerParams {
    /// Structural group boundaries; empty for shared layers.
    pub fn group_boundaries(&self) -> &[Range<usize>] {
        if self.decoupled {
            &self.out_groups
        } else {
            &[]
        }
    }

    /// Flat range of group `g`'s weight block.
    pub fn weight_block(&self, g: usize) -> Range<usize> {
        if self.kind.is_norm() {
            return self.out_groups[g].clone();
        }
        let kk = if self.kind.is_conv() { self.kernel * self.kernel } else { 1 };
        ops::block_offsets(&self.in_groups, &self.out_groups, kk)[g].clone()
    }

    pub fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Number of scalars exchanged when this layer is shipped, running
    /// statistics included.
    pub fn exchanged_len(&self) -> usize {
        self.param_len() + self.running.as_ref().map_or(0, |r| r.mean.len() + r.var.len())
    }

    pub(super) fn weight_shape(&self) -> Vec<usize> {
        let first = self.in_groups[0].len();
        let uniform = self.in_groups.iter().all(|r| r.len() == first);
        let kk = self.kernel * self.kernel;
        if !uniform {
            return vec![ops::block_offsets(&self.in_groups, &self.out_groups, kk)
                .last()
                .map_or(0, |r| r.end)];
        }
        if self.kind.is_conv() {
            vec![self.out_channels, first, self.kernel, self.kernel]
        } else {
            vec![self.out_channels, first]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Param(LayerParams),
    Relu,
    MaxPool,
    Flatten,
}

impl Layer {
    pub fn params(&self) -> Option<&LayerParams> {
        match self {
            Layer::Param(p) => Some(p),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LayerParams> {
        match self {
            Layer::Param(p) => Some(p),
            _ => None,
        }
    }

    fn name(&self, index: usize) -> String {
        match self {
            Layer::Param(p) => format!("layer {index} ({})", p.kind.as_str()),
            Layer::Relu => format!("layer {index} (relu)"),
            Layer::MaxPool => format!("layer {index} (max_pool)"),
            Layer::Flatten => format!("layer {index} (flatten)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

/// A hidden weighted layer's analysable output: the activation after its
/// norm and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePoint {
    pub weighted_index: usize,
    /// Index of the op whose output is the activation.
    pub op_index: usize,
    pub neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

pub(super) enum Aux {
    None,
    Pool(Vec<usize>),
    Norm(NormCache),
}

pub struct ActivationCache {
    /// `inputs[i]` is the input of op `i`; `inputs[len]` is the logits.
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    mode: Mode,
    fingerprint: u64,
}

impl ActivationCache {
    pub fn logits(&self) -> &Tensor {
        self.inputs.last().expect("cache holds logits")
    }

    /// Output of op `i`.
    pub fn output(&self, i: usize) -> &Tensor {
        &self.inputs[i + 1]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One gradient per parameter tensor, aligned with `Model::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Option<ParamGrad>>,
}

impl GradientSet {
    pub fn get(&self, layer_index: usize) -> Option<&ParamGrad> {
        self.layers.get(layer_index).and_then(|g| g.as_ref())
    }
}

pub struct Backprop {
    pub grads: GradientSet,
    /// `activation_grads[i]` is the gradient w.r.t. the output of op `i`.
    pub activation_grads: Vec<Tensor>,
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = logits.batch();
    if labels.len() != b {
        return Err(Error::Shape {
            layer: "loss".into(),
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    let c = logits.row_len();
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Dataset(format!("label {y} outside [0, {c})")));
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for j in 0..c {
            let p = (row[j] - m).exp() / z;
            grad[i * c + j] = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

impl Model {
    /// Allocates and He-uniform initialises every layer of `spec`.
    pub fn instantiate(spec: &ModelSpec, rng: &mut RngStream) -> Result<Model> {
        let plan = spec.plan()?;
        let mut layers = Vec::with_capacity(plan.len());
        for (index, op) in plan.into_iter().enumerate() {
            let layer = match op {
                OpPlan::Relu => Layer::Relu,
                OpPlan::MaxPool => Layer::MaxPool,
                OpPlan::Flatten => Layer::Flatten,
                OpPlan::Conv {
                    weighted_index,
                    in_channels,
                    out_channels,
                    kernel,
                    in_groups,
                    out_groups,
                    decoupled,
                } => {
                    let kind = if decoupled { LayerKind::GroupConv } else { LayerKind::Conv };
                    Layer::Param(weighted_params(
                        index,
                        weighted_index,
                        kind,
                        kernel,
                        in_channels,
                        out_channels,
                        in_groups,
                        out_groups,
                        decoupled,
                        rng,
                    )?)
                }
                OpPlan::Dense {
                    weighted_index,
                    in_features,
                    out_features,
                    in_groups,
                    out_groups,
                    decoupled,
                } => {
                    let kind = if decoupled { LayerKind::GroupedDense } else { LayerKind::Dense };
                    Layer::Param(weighted_params(
                        index,
                        weighted_index,
                        kind,
                        1,
                        in_features,
                        out_features,
                        in_groups,
                        out_groups,
                        decoupled,
                        rng,
                    )?)
                }
                OpPlan::GroupNorm {
                    channels,
                    norm_groups,
                    out_groups,
                    decoupled,
                } => Layer::Param(LayerParams {
                    layer_index: index,
                    weighted_index: None,
                    kind: LayerKind::GroupNorm,
                    weight: Tensor::filled(&[channels], 1.0),
                    bias: Tensor::zeros(&[channels]),
                    kernel: 1,
                    in_channels: channels,
                    out_channels: channels,
                    in_groups: out_groups.clone(),
                    out_groups,
                    norm_groups,
                    decoupled,
                    running: None,
                }),
                OpPlan::BatchNorm {
                    channels,
                    out_groups,
                    decoupled,
                } => Layer::Param(LayerParams {
                    layer_index: index,
                    weighted_index: None,
                    kind: LayerKind::BatchNorm,
                    weight: Tensor::filled(&[channels], 1.0),
                    bias: Tensor::zeros(&[channels]),
                    kernel: 1,
                    in_channels: channels,
                    out_channels: channels,
                    in_groups: out_groups.clone(),
                    out_groups,
                    norm_groups: Vec::new(),
                    decoupled,
                    running: Some(RunningStats {
                        mean: Tensor::zeros(&[channels]),
                        var: Tensor::filled(&[channels], 1.0),
                    }),
                }),
            };
            layers.push(layer);
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn param_layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.layers.iter().filter_map(Layer::params)
    }

    pub fn param_layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.layers.iter_mut().filter_map(Layer::params_mut)
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.param_layers().map(LayerParams::param_len).sum()
    }

    /// Scalars shipped when the whole model is exchanged.
    pub fn exchanged_len(&self) -> usize {
        self.param_layers().map(LayerParams::exchanged_len).sum()
    }

    pub fn weighted_layer(&self, weighted_index: usize) -> Option<&LayerParams> {
        self.param_layers()
            .find(|p| p.weighted_index == Some(weighted_index))
    }

    /// Hidden weighted layers and the op whose output is their activation.
    pub fn feature_points(&self) -> Vec<FeaturePoint> {
        let logit = self.spec.weighted_layer_count() - 1;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(p) = layer.params() else { continue };
            let Some(w) = p.weighted_index else { continue };
            if w == logit {
                continue;
            }
            let mut end = i;
            while let Some(next) = self.layers.get(end + 1) {
                match next {
                    Layer::Relu => end += 1,
                    Layer::Param(q) if q.kind.is_norm() => end += 1,
                    _ => break,
                }
            }
            out.push(FeaturePoint {
                weighted_index: w,
                op_index: end,
                neurons: p.out_channels,
            });
        }
        out
    }

    /// Hash of every parameter bit; ties caches to the exact model state.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.layers.len().hash(&mut h);
        for p in self.param_layers() {
            p.layer_index.hash(&mut h);
            for t in [&p.weight, &p.bias] {
                t.shape().hash(&mut h);
                for v in t.data() {
                    v.to_bits().hash(&mut h);
                }
            }
            if let Some(r) = &p.running {
                for v in r.mean.data().iter().chain(r.var.data()) {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ActivationCache> {
        let expected = &self.spec.input_shape;
        if x.rank() != expected.len() + 1 || &x.shape()[1..] != expected.as_slice() {
            let mut exp = vec![x.shape().first().copied().unwrap_or(0)];
            exp.extend_from_slice(expected);
            return Err(Error::Shape {
                layer: "input".into(),
                expected: exp,
                actual: x.shape().to_vec(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &inputs[i];
            let (out, a) = forward_op(i, layer, input, mode)?;
            inputs.push(out);
            aux.push(a);
        }
        Ok(ActivationCache {
            inputs,
            aux,
            mode,
            fingerprint: self.fingerprint(),
        })
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let cache = self.forward(x, Mode::Eval)?;
        Ok(cache.inputs.last().cloned().expect("cache holds logits"))
    }

    /// Backpropagates an arbitrary upstream gradient on the logits.
    pub fn backward_from(&self, cache: &ActivationCache, grad_logits: &Tensor) -> Result<Backprop> {
        if cache.fingerprint != self.fingerprint() || cache.inputs.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache);
        }
        if grad_logits.shape() != cache.logits().shape() {
            return Err(Error::Shape {
                layer: "logits".into(),
                expected: cache.logits().shape().to_vec(),
                actual: grad_logits.shape().to_vec(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<Option<ParamGrad>> = vec![None; n];
        let mut activation_grads: Vec<Tensor> = Vec::with_capacity(n);
        let mut dy = grad_logits.clone();
        for i in (0..n).rev() {
            activation_grads.push(dy.clone());
            let x = &cache.inputs[i];
            let b = x.batch();
            let dx = match &self.layers[i] {
                Layer::Relu => {
                    let data = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                Layer::Flatten => dy.reshape(x.shape().to_vec())?,
                Layer::MaxPool => {
                    let Aux::Pool(arg) = &cache.aux[i] else {
                        return Err(Error::StaleCache);
                    };
                    Tensor::new(
                        x.shape().to_vec(),
                        ops::max_pool_backward(dy.data(), arg, x.len()),
                    )?
                }
                Layer::Param(p) => {
                    let (dx, dw, db) = match p.kind {
                        LayerKind::Conv | LayerKind::GroupConv => {
                            let s = x.shape();
                            let geom = ConvGeom {
                                batch: b,
                                in_channels: s[1],
                                out_channels: p.out_channels,
                                h: s[2],
                                w: s[3],
                                k: p.kernel,
                                in_groups: &p.in_groups,
                                out_groups: &p.out_groups,
                            };
                            ops::conv_backward(&geom, x.data(), p.weight.data(), dy.data())
                        }
                        LayerKind::Dense | LayerKind::GroupedDense => {
                            let geom = DenseGeom {
                                batch: b,
                                in_features: p.in_channels,
                                out_features: p.out_channels,
                                in_groups: &p.in_groups,
                                out_groups: &p.out_groups,
                            };
                            ops::dense_backward(&geom, x.data(), p.weight.data(), dy.data())
                        }
                        LayerKind::GroupNorm | LayerKind::BatchNorm => {
                            let Aux::Norm(nc) = &cache.aux[i] else {
                                return Err(Error::StaleCache);
                            };
                            let spatial = x.row_len() / p.out_channels;
                            if p.kind == LayerKind::GroupNorm {
                                ops::group_norm_backward(
                                    dy.data(),
                                    nc,
                                    b,
                                    p.out_channels,
                                    spatial,
                                    &p.norm_groups,
                                    p.weight.data(),
                                )
                            } else {
                                ops::batch_norm_backward(
                                    dy.data(),
                                    nc,
                                    b,
                                    p.out_channels,
                                    spatial,
                                    p.weight.data(),
                                    cache.mode == Mode::Train || p.running.is_none(),
                                )
                            }
                        }
                    };
                    grads[i] = Some(ParamGrad {
                        weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
                        bias: Tensor::new(p.bias.shape().to_vec(), db)?,
                    });
                    Tensor::new(x.shape().to_vec(), dx)?
                }
            };
            dy = dx;
        }
        activation_grads.reverse();
        Ok(Backprop {
            grads: GradientSet { layers: grads },
            activation_grads,
        })
    }

    /// Softmax cross-entropy loss and its parameter gradients.
    pub fn backward(&self, cache: &ActivationCache, labels: &[usize]) -> Result<(f64, GradientSet)> {
        let (loss, dlogits) = softmax_cross_entropy(cache.logits(), labels)?;
        let bp = self.backward_from(cache, &dlogits)?;
        Ok((loss, bp.grads))
    }

    /// Mean loss on a batch, evaluated in `mode`.
    pub fn loss(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
        let cache = self.forward(x, mode)?;
        Ok(softmax_cross_entropy(cache.logits(), labels)?.0)
    }

    /// `ω ← ω − lr·∇ω` for every parameter tensor.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape {
                layer: "gradient set".into(),
                expected: vec![self.layers.len()],
                actual: vec![grads.layers.len()],
            });
        }
        for (i, (layer, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            match (layer.params(), g) {
                (Some(p), Some(g)) => {
                    if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                        return Err(Error::Shape {
                            layer: layer.name(i),
                            expected: p.weight.shape().to_vec(),
                            actual: g.weight.shape().to_vec(),
                        });
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Shape {
                        layer: layer.name(i),
                        expected: vec![],
                        actual: vec![],
                    })
                }
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (layer.params_mut(), g) {
                for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= lr * d;
                }
                for (w, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *w -= lr * d;
                }
            }
        }
        Ok(())
    }

    /// Folds a training-mode batch's statistics into batch-norm running
    /// averages (momentum 0.1). No-op for models without batch norm.
    pub fn update_running_stats(&mut self, cache: &ActivationCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, aux) in self.layers.iter_mut().zip(&cache.aux) {
            if let (Layer::Param(p), Aux::Norm(nc)) = (layer, aux) {
                if let Some(r) = &mut p.running {
                    for (m, bm) in r.mean.data_mut().iter_mut().zip(&nc.batch_mean) {
                        *m = 0.9 * *m + 0.1 * bm;
                    }
                    for (v, bv) in r.var.data_mut().iter_mut().zip(&nc.batch_var) {
                        *v = 0.9 * *v + 0.1 * bv;
                    }
                }
            }
        }
    }

    /// True when both models have the same spec and parameter layout.
    pub fn same_structure(&self, other: &Model) -> bool {
        self.spec == other.spec
            && self.layers.len() == other.layers.len()
            && self
                .param_layers()
                .zip(other.param_layers())
                .all(|(a, b)| {
                    a.kind == b.kind
                        && a.weight.shape() == b.weight.shape()
                        && a.out_groups == b.out_groups
                        && a.in_groups == b.in_groups
                })
    }

    /// Bitwise parameter equality.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.same_structure(other)
            && self.param_layers().zip(other.param_layers()).all(|(a, b)| {
                a.weight.bit_eq(&b.weight)
                    && a.bias.bit_eq(&b.bias)
                    && match (&a.running, &b.running) {
                        (Some(x), Some(y)) => x.mean.bit_eq(&y.mean) && x.var.bit_eq(&y.var),
                        (None, None) => true,
                        _ => false,
                    }
            })
    }
}


pub(super) fn forward_op(i: usize, layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, Aux)> {
    let b = x.batch();
    let shape_err = |expected: Vec<usize>| Error::Shape {
        layer: layer.name(i),
        expected,
        actual: x.shape().to_vec(),
    };
    Ok(match layer {
        Layer::Relu => {
            let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            (Tensor::new(x.shape().to_vec(), data)?, Aux::None)
        }
        Layer::Flatten => {
            let n = x.row_len();
            (x.clone().reshape(vec![b, n])?, Aux::None)
        }
        Layer::MaxPool => {
            let [_, c, h, w] = *x.shape() else {
                return Err(shape_err(vec![b, 0, 0, 0]));
            };
            let (y, arg) = ops::max_pool_forward(x.data(), b * c, h, w);
            (Tensor::new(vec![b, c, h / 2, w / 2], y)?, Aux::Pool(arg))
        }
        Layer::Param(p) => match p.kind {
            LayerKind::Conv | LayerKind::GroupConv => {
                let [_, c, h, w] = *x.shape() else {
                    return Err(shape_err(vec![b, p.in_channels, 0, 0]));
                };
                if c != p.in_channels {
                    return Err(shape_err(vec![b, p.in_channels, h, w]));
                }
                let geom = ConvGeom {
                    batch: b,
                    in_channels: c,
                    out_channels: p.out_channels,
                    h,
                    w,
                    k: p.kernel,
                    in_groups: &p.in_groups,
                    out_groups: &p.out_groups,
                };
                let y = ops::conv_forward(&geom, x.data(), p.weight.data(), p.bias.data());
                (Tensor::new(vec![b, p.out_channels, h, w], y)?, Aux::None)
            }
            LayerKind::Dense | LayerKind::GroupedDense => {
                if x.rank() != 2 || x.row_len() != p.in_channels {
                    return Err(shape_err(vec![b, p.in_channels]));
                }
                let geom = DenseGeom {
                    batch: b,
                    in_features: p.in_channels,
                    out_features: p.out_channels,
                    in_groups: &p.in_groups,
                    out_groups: &p.out_groups,
                };
                let y = ops::dense_forward(&geom, x.data(), p.weight.data(), p.bias.data());
                (Tensor::new(vec![b, p.out_channels], y)?, Aux::None)
            }
            LayerKind::GroupNorm | LayerKind::BatchNorm => {
                if x.rank() < 2 || x.shape()[1] != p.out_channels {
                    return Err(shape_err(vec![b, p.out_channels]));
                }
                let spatial = x.row_len() / p.out_channels;
                let (y, cache) = if p.kind == LayerKind::GroupNorm {
                    ops::group_norm_forward(
                        x.data(),
                        b,
                        p.out_channels,
                        spatial,
                        &p.norm_groups,
                        p.weight.data(),
                        p.bias.data(),
                    )
                } else {
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => p
                            .running
                            .as_ref()
                            .map(|r| (r.mean.data(), r.var.data())),
                    };
                    ops::batch_norm_forward(
                        x.data(),
                        b,
                        p.out_channels,
                        spatial,
                        p.weight.data(),
                        p.bias.data(),
                        running,
                    )
                };
                (Tensor::new(x.shape().to_vec(), y)?, Aux::Norm(cache))
            }
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn weighted_params(
    layer_index: usize,
    weighted_index: usize,
    kind: LayerKind,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    in_groups: Vec<Range<usize>>,
    out_groups: Vec<Range<usize>>,
    decoupled: bool,
    rng: &mut RngStream,
) -> Result<LayerParams> {
    if in_groups.len() != out_groups.len() {
        return Err(Error::Groups {
            layer: format!("layer {layer_index}"),
            detail: format!("{} input groups vs {} output groups", in_groups.len(), out_groups.len()),
        });
    }
    let kk = kernel * kernel;
    let mut weight = Vec::new();
    for (ig, og) in in_groups.iter().zip(&out_groups) {
        let fan_in = (ig.len() * kk) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for _ in 0..ig.len() * og.len() * kk {
            weight.push(rng.uniform_range(-bound, bound));
        }
    }
    let mut p = LayerParams {
        layer_index,
        weighted_index: Some(weighted_index),
        kind,
        weight: Tensor::from_vec(weight),
        bias: Tensor::zeros(&[out_channels]),
        kernel,
        in_channels,
        out_channels,
        in_groups,
        out_groups,
        norm_groups: Vec::new(),
        decoupled,
        running: None,
    };
    let shape = p.weight_shape();
    p.weight = p.weight.clone().reshape(shape)?;
    Ok(p)
}
