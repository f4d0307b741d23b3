//! Permutation algebra on hidden channels and coordinate-averaging
//! conflicts.
//!
//! Reordering the output channels of one weighted layer, together with the
//! matching input channels of the next weighted layer and every norm layer
//! in between, leaves the network function unchanged. Permutations must stay
//! inside the blocks formed by compute groups and normalization groups,
//! otherwise the reordering is not lossless.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cohort_preferences, LayerPreferences, Polarity, ProbeSet};
use crate::nn::{Layer, LayerParams, Model};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A bijection on `[0, n)` stored as an index map: position `j` of a
/// permuted vector holds entry `map[j]` of the original.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationMatrix {
    map: Vec<usize>,
}

impl PermutationMatrix {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Permutation(format!("{map:?} is not a bijection")));
            }
        }
        Ok(PermutationMatrix { map })
    }

    pub fn identity(n: usize) -> Self {
        PermutationMatrix { map: (0..n).collect() }
    }

    pub fn random(n: usize, rng: &mut RngStream) -> Self {
        PermutationMatrix { map: rng.permutation(n) }
    }

    /// Random permutation that maps every block onto itself.
    pub fn random_within(blocks: &[Range<usize>], rng: &mut RngStream) -> Self {
        let mut map = Vec::new();
        for b in blocks {
            map.extend(rng.permutation(b.len()).into_iter().map(|i| b.start + i));
        }
        PermutationMatrix { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// The inverse permutation.
    pub fn transpose(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (j, &m) in self.map.iter().enumerate() {
            inv[m] = j;
        }
        PermutationMatrix { map: inv }
    }

    /// Applying `self` and then `next`.
    pub fn then(&self, next: &PermutationMatrix) -> Result<Self> {
        if next.len() != self.len() {
            return Err(Error::Permutation(format!("sizes {} and {} differ", self.len(), next.len())));
        }
        Ok(PermutationMatrix {
            map: next.map.iter().map(|&j| self.map[j]).collect(),
        })
    }

    pub fn apply<T: Clone>(&self, v: &[T]) -> Vec<T> {
        self.map.iter().map(|&j| v[j].clone()).collect()
    }

    /// True when every index stays inside its range of `blocks`.
    pub fn respects(&self, blocks: &[Range<usize>]) -> bool {
        blocks
            .iter()
            .all(|b| b.clone().all(|j| b.contains(&self.map[j])))
    }
}

fn check_len(what: &str, pi: &PermutationMatrix, n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(Error::Permutation(format!("{what} has {n} channels, permutation has {}", pi.len())));
    }
    Ok(())
}

fn check_blocks(what: &str, pi: &PermutationMatrix, blocks: &[Range<usize>]) -> Result<()> {
    if !pi.respects(blocks) {
        return Err(Error::Permutation(format!("permutation crosses a group boundary of {what}")));
    }
    Ok(())
}

/// Reorders output channels: weight rows, bias, norm scale/shift and
/// running statistics.
pub fn permute_outputs(p: &LayerParams, pi: &PermutationMatrix) -> Result<LayerParams> {
    let name = p.kind.as_str();
    check_len(name, pi, p.out_channels)?;
    let permuted = |t: &Tensor| Tensor::new(t.shape().to_vec(), pi.apply(t.data()));
    let mut q = p.clone();
    q.bias = permuted(&p.bias)?;
    if let Some(r) = &mut q.running {
        r.mean = permuted(&r.mean)?;
        r.var = permuted(&r.var)?;
    }
    if p.kind.is_norm() {
        check_blocks(name, pi, &p.norm_groups)?;
        check_blocks(name, pi, &p.out_groups)?;
        q.weight = permuted(&p.weight)?;
        return Ok(q);
    }
    check_blocks(name, pi, &p.out_groups)?;
    let kk = p.kernel * p.kernel;
    let src = p.weight.data();
    let dst = q.weight.data_mut();
    for (g, (ig, og)) in p.in_groups.iter().zip(&p.out_groups).enumerate() {
        let block = p.weight_block(g);
        let row = ig.len() * kk;
        for o in og.clone() {
            let to = block.start + (o - og.start) * row;
            let from = block.start + (pi.as_slice()[o] - og.start) * row;
            dst[to..to + row].copy_from_slice(&src[from..from + row]);
        }
    }
    Ok(q)
}

/// Reorders input channels of a weighted layer. Each channel owns `spatial`
/// consecutive input features (more than one when a flatten precedes a
/// dense layer).
pub fn permute_inputs(p: &LayerParams, pi: &PermutationMatrix, spatial: usize) -> Result<LayerParams> {
    let name = p.kind.as_str();
    if p.kind.is_norm() {
        return Err(Error::Permutation("norm layers have no input weights".into()));
    }
    if spatial == 0 || pi.len() * spatial != p.in_channels {
        return Err(Error::Permutation(format!(
            "{name} takes {} inputs, permutation covers {} channels of {spatial}",
            p.in_channels,
            pi.len()
        )));
    }
    let fmap: Vec<usize> = (0..p.in_channels)
        .map(|f| pi.as_slice()[f / spatial] * spatial + f % spatial)
        .collect();
    if p.in_groups.iter().any(|r| r.clone().any(|f| !r.contains(&fmap[f]))) {
        return Err(Error::Permutation(format!("permutation crosses an input group of {name}")));
    }
    let kk = p.kernel * p.kernel;
    let mut q = p.clone();
    let src = p.weight.data();
    let dst = q.weight.data_mut();
    for (g, (ig, og)) in p.in_groups.iter().zip(&p.out_groups).enumerate() {
        let block = p.weight_block(g);
        let row = ig.len() * kk;
        for o in 0..og.len() {
            let base = block.start + o * row;
            for f in ig.clone() {
                let to = base + (f - ig.start) * kk;
                let from = base + (fmap[f] - ig.start) * kk;
                dst[to..to + kk].copy_from_slice(&src[from..from + kk]);
            }
        }
    }
    Ok(q)
}

/// Permutes the output channels of `this` and the matching input channels
/// of `next`, which directly consumes them.
pub fn repermute_pair(
    next: &LayerParams,
    this: &LayerParams,
    pi: &PermutationMatrix,
) -> Result<(LayerParams, LayerParams)> {
    if this.kind.is_norm() || next.kind.is_norm() {
        return Err(Error::Permutation("repermute_pair takes two weighted layers".into()));
    }
    if this.out_channels == 0 || next.in_channels % this.out_channels != 0 {
        return Err(Error::Permutation(format!(
            "{} outputs cannot feed {} inputs",
            this.out_channels, next.in_channels
        )));
    }
    let spatial = next.in_channels / this.out_channels;
    Ok((permute_inputs(next, pi, spatial)?, permute_outputs(this, pi)?))
}

/// Op indices of hidden weighted layer `weighted_index`, of the norm
/// layers after it, and of the next weighted layer.
fn span_of(model: &Model, weighted_index: usize) -> Result<(usize, Vec<usize>, usize)> {
    let this = model
        .layers
        .iter()
        .position(|l| l.params().and_then(|p| p.weighted_index) == Some(weighted_index))
        .ok_or_else(|| Error::Permutation(format!("no weighted layer {weighted_index}")))?;
    let mut norms = Vec::new();
    for (i, layer) in model.layers.iter().enumerate().skip(this + 1) {
        if let Layer::Param(p) = layer {
            if p.kind.is_norm() {
                norms.push(i);
            } else {
                return Ok((this, norms, i));
            }
        }
    }
    Err(Error::Permutation(format!(
        "layer {weighted_index} is the logit layer; its outputs cannot be permuted"
    )))
}

fn params(model: &Model, i: usize) -> &LayerParams {
    model.layers[i].params().expect("span_of returns parameter layers")
}

/// Coarsest blocks inside which the hidden channels of a layer may be
/// permuted losslessly.
pub fn admissible_blocks(model: &Model, weighted_index: usize) -> Result<Vec<Range<usize>>> {
    let (this, norms, next) = span_of(model, weighted_index)?;
    let t = params(model, this);
    let n = t.out_channels;
    let spatial = params(model, next).in_channels / n;
    let mut cuts = vec![0, n];
    let mut add = |ranges: &[Range<usize>], scale: usize| {
        for r in ranges {
            cuts.push(r.start / scale);
            cuts.push(r.end / scale);
        }
    };
    add(&t.out_groups, 1);
    for &i in &norms {
        add(&params(model, i).norm_groups, 1);
        add(&params(model, i).out_groups, 1);
    }
    add(&params(model, next).in_groups, spatial);
    cuts.sort_unstable();
    cuts.dedup();
    Ok(cuts.windows(2).map(|w| w[0]..w[1]).collect())
}

/// Applies `pi` to the hidden channels after weighted layer
/// `weighted_index`; the returned model computes the same function.
pub fn permute_layer(model: &Model, weighted_index: usize, pi: &PermutationMatrix) -> Result<Model> {
    let (this, norms, next) = span_of(model, weighted_index)?;
    let mut out = model.clone();
    let (n2, t2) = repermute_pair(params(model, next), params(model, this), pi)?;
    out.layers[this] = Layer::Param(t2);
    out.layers[next] = Layer::Param(n2);
    for i in norms {
        out.layers[i] = Layer::Param(permute_outputs(params(model, i), pi)?);
    }
    Ok(out)
}

/// Independently permutes every hidden layer of `model` at random.
pub fn scramble_model(model: &Model, rng: &mut RngStream) -> Result<Model> {
    let mut out = model.clone();
    for w in 0..model.spec.weighted_layer_count() - 1 {
        let blocks = admissible_blocks(&out, w)?;
        let pi = PermutationMatrix::random_within(&blocks, rng);
        out = permute_layer(&out, w, &pi)?;
    }
    Ok(out)
}

/// Scrambles each client with its own random permutations.
pub fn scramble_clients(clients: &[Model], rng: &mut RngStream) -> Result<Vec<Model>> {
    clients
        .iter()
        .enumerate()
        .map(|(n, m)| scramble_model(m, &mut rng.fork(n as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConflict {
    pub layer: usize,
    /// Per neuron, fraction of client pairs whose top classes differ.
    pub disagreement: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub layers: Vec<LayerConflict>,
}

impl ConflictReport {
    /// Mean of the layer means.
    pub fn mean(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.mean).sum::<f64>() / self.layers.len() as f64
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerConflict> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Columns `layer,neuron,disagreement,layer_mean`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "neuron", "disagreement", "layer_mean"])?;
        for l in &self.layers {
            for (i, d) in l.disagreement.iter().enumerate() {
                out.write_record([l.layer.to_string(), i.to_string(), d.to_string(), l.mean.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Conflict report from precomputed per-client preferences. With fewer
/// than two clients every disagreement is zero.
pub fn conflict_from_preferences(clients: &[Vec<LayerPreferences>], polarity: Polarity) -> ConflictReport {
    let Some(first) = clients.first() else {
        return ConflictReport { layers: Vec::new() };
    };
    let pairs = clients.len() * (clients.len() - 1) / 2;
    let layers = first
        .iter()
        .enumerate()
        .map(|(li, l)| {
            let tops: Vec<Vec<usize>> = clients
                .iter()
                .map(|c| c[li].neurons.iter().map(|n| n.top_class_with(polarity)).collect())
                .collect();
            let disagreement: Vec<f64> = (0..l.neurons.len())
                .map(|i| {
                    if pairs == 0 {
                        return 0.0;
                    }
                    let mut differ = 0;
                    for a in 0..tops.len() {
                        for b in a + 1..tops.len() {
                            differ += usize::from(tops[a][i] != tops[b][i]);
                        }
                    }
                    differ as f64 / pairs as f64
                })
                .collect();
            let mean = if disagreement.is_empty() {
                0.0
            } else {
                disagreement.iter().sum::<f64>() / disagreement.len() as f64
            };
            LayerConflict { layer: l.layer, disagreement, mean }
        })
        .collect();
    ConflictReport { layers }
}

pub fn conflict_report(clients: &[Model], probe: &ProbeSet) -> Result<ConflictReport> {
    Ok(conflict_from_preferences(&cohort_preferences(clients, probe)?, Polarity::Signed))
}
