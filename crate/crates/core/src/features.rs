//! Class preference vectors, layer encodings, total variance and the
//! cross-client feature alignment distance.
//!
//! A neuron's preference for class `c` is the attribution
//! `p_c = sum_b sum_s A * dZ_c/dA` over the probe batches of class `c` and
//! the neuron's spatial positions, where `A` is the neuron's activation
//! after normalization and ReLU. Models are evaluated in eval mode.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Fixed probe batches, grouped by class.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    class_batches: Vec<Vec<Tensor>>,
}

impl ProbeSet {
    /// `class_batches[c]` holds the batches of class `c`; every class needs
    /// at least one batch.
    pub fn new(class_batches: Vec<Vec<Tensor>>) -> Result<Self> {
        let missing: Vec<usize> = class_batches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_empty())
            .map(|(c, _)| c)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        Ok(ProbeSet { class_batches })
    }

    /// Draws `batches` batches of `batch_size` samples per class from `ds`
    /// without replacement; short classes get fewer or smaller batches.
    pub fn from_dataset(ds: &Dataset, batches: usize, batch_size: usize, rng: &mut RngStream) -> Result<Self> {
        let mut class_batches = Vec::with_capacity(ds.class_count());
        for c in 0..ds.class_count() {
            let mut idx = ds.indices_of_class(c);
            rng.shuffle(&mut idx);
            idx.truncate(batches * batch_size);
            let list = idx
                .chunks(batch_size.max(1))
                .map(|chunk| ds.samples().select_rows(chunk))
                .collect();
            class_batches.push(list);
        }
        ProbeSet::new(class_batches)
    }

    pub fn class_count(&self) -> usize {
        self.class_batches.len()
    }

    pub fn batches(&self, class: usize) -> &[Tensor] {
        &self.class_batches[class]
    }
}

/// Whether encodings use the raw signed attribution or clip negatives to
/// zero before taking the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Signed,
    Clipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    /// Weighted layer index.
    pub layer: usize,
    pub neuron: usize,
    pub p: Vec<f64>,
    pub top_class: usize,
}

impl PreferenceVector {
    pub fn new(layer: usize, neuron: usize, p: Vec<f64>) -> Self {
        let top_class = top_class(&p);
        PreferenceVector { layer, neuron, p, top_class }
    }

    pub fn top_class_with(&self, polarity: Polarity) -> usize {
        match polarity {
            Polarity::Signed => self.top_class,
            Polarity::Clipped => argmax(&self.p.iter().map(|v| v.max(0.0)).collect::<Vec<_>>()),
        }
    }
}

/// Largest entry among the nonzero ones, lowest index on ties; 0 when all
/// entries are zero. An exact zero means the class has no gradient path to
/// the neuron, so it never outranks a class that does.
pub fn top_class(p: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &x) in p.iter().enumerate() {
        if x != 0.0 && best.map_or(true, |b| x > p[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEncoding {
    pub layer: usize,
    pub top_class: Vec<usize>,
}

/// Preference vectors of every neuron of one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPreferences {
    pub layer: usize,
    pub neurons: Vec<PreferenceVector>,
}

impl LayerPreferences {
    pub fn encoding(&self, polarity: Polarity) -> LayerEncoding {
        LayerEncoding {
            layer: self.layer,
            top_class: self.neurons.iter().map(|n| n.top_class_with(polarity)).collect(),
        }
    }

    pub fn total_variance(&self) -> f64 {
        let vs: Vec<&[f64]> = self.neurons.iter().map(|n| n.p.as_slice()).collect();
        total_variance(&vs)
    }
}

/// Preference vectors for all hidden weighted layers of a model.
pub fn model_preferences(model: &Model, probe: &ProbeSet) -> Result<Vec<LayerPreferences>> {
    let classes = model.spec.class_count;
    if probe.class_count() != classes {
        let missing = (probe.class_count()..classes).collect::<Vec<_>>();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        return Err(Error::Spec(format!(
            "probe covers {} classes, model has {classes}",
            probe.class_count()
        )));
    }
    let points = model.feature_points();
    // acc[point][neuron * classes + c]
    let mut acc: Vec<Vec<f64>> = points.iter().map(|p| vec![0.0; p.neurons * classes]).collect();
    for c in 0..classes {
        for x in probe.batches(c) {
            let cache = model.forward(x, Mode::Eval)?;
            let logits = cache.logits();
            let mut d = vec![0.0; logits.len()];
            for b in 0..logits.batch() {
                d[b * classes + c] = 1.0;
            }
            let bp = model.backward_from(&cache, &Tensor::new(logits.shape().to_vec(), d)?)?;
            for (pi, fp) in points.iter().enumerate() {
                let a = cache.output(fp.op_index);
                let g = &bp.activation_grads[fp.op_index];
                let spatial = a.row_len() / fp.neurons;
                for (ra, rg) in a.data().chunks(a.row_len()).zip(g.data().chunks(a.row_len())) {
                    for i in 0..fp.neurons {
                        let span = i * spatial..(i + 1) * spatial;
                        let s: f64 = ra[span.clone()].iter().zip(&rg[span]).map(|(u, v)| u * v).sum();
                        acc[pi][i * classes + c] += s;
                    }
                }
            }
        }
    }
    Ok(points
        .iter()
        .zip(acc)
        .map(|(fp, a)| LayerPreferences {
            layer: fp.weighted_index,
            neurons: a
                .chunks(classes)
                .enumerate()
                .map(|(i, p)| PreferenceVector::new(fp.weighted_index, i, p.to_vec()))
                .collect(),
        })
        .collect())
}

fn layer_of(prefs: Vec<LayerPreferences>, layer: usize) -> Result<LayerPreferences> {
    prefs
        .into_iter()
        .find(|l| l.layer == layer)
        .ok_or_else(|| Error::Spec(format!("layer {layer} is not a hidden weighted layer")))
}

pub fn preference_vector(model: &Model, probe: &ProbeSet, layer: usize, neuron: usize) -> Result<PreferenceVector> {
    let l = layer_of(model_preferences(model, probe)?, layer)?;
    let n = l.neurons.len();
    l.neurons
        .into_iter()
        .nth(neuron)
        .ok_or_else(|| Error::Spec(format!("layer {layer} has {n} neurons, asked for {neuron}")))
}

pub fn layer_encoding(model: &Model, probe: &ProbeSet, layer: usize) -> Result<LayerEncoding> {
    Ok(layer_of(model_preferences(model, probe)?, layer)?.encoding(Polarity::Signed))
}

/// Mean Euclidean distance of the vectors from their centroid.
pub fn total_variance(vectors: &[&[f64]]) -> f64 {
    let Some(first) = vectors.first() else { return 0.0 };
    let n = vectors.len() as f64;
    // Shifted mean, so identical vectors give a centroid equal to them.
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        for ((m, x), x0) in mean.iter_mut().zip(v.iter()).zip(first.iter()) {
            *m += x - x0;
        }
    }
    mean.iter_mut().zip(first.iter()).for_each(|(m, x0)| *m = x0 + *m / n);
    vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

pub fn layer_total_variance(encodings: &[PreferenceVector]) -> f64 {
    let vs: Vec<&[f64]> = encodings.iter().map(|n| n.p.as_slice()).collect();
    total_variance(&vs)
}

/// Smallest layer whose variance exceeds `tau` times the profile maximum;
/// `None` when the profile is all zero.
pub fn select_decouple_depth(tv_profile: &[f64], tau: f64) -> Result<Option<usize>> {
    if tv_profile.is_empty() {
        return Err(Error::Spec("empty total-variance profile".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Spec(format!("threshold {tau} outside (0, 1)")));
    }
    let max = tv_profile.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(None);
    }
    Ok(tv_profile.iter().position(|&t| t > tau * max))
}

fn normalized(p: &[f64]) -> Option<Vec<f64>> {
    let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        None
    } else {
        Some(p.iter().map(|v| v / n).collect())
    }
}

/// Distance between two preference vectors after L2 normalization; a zero
/// vector is at distance 0 from another zero vector and 1 from anything
/// else.
pub fn preference_distance(a: &[f64], b: &[f64]) -> f64 {
    match (normalized(a), normalized(b)) {
        (None, None) => 0.0,
        (None, Some(_)) | (Some(_), None) => 1.0,
        (Some(x), Some(y)) => x.iter().zip(&y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt(),
    }
}

/// Alignment distance from precomputed per-client preferences.
pub fn alignment_from_preferences(clients: &[Vec<LayerPreferences>]) -> f64 {
    let mut total = 0.0;
    for a in 0..clients.len() {
        for b in a + 1..clients.len() {
            for (la, lb) in clients[a].iter().zip(&clients[b]) {
                for (na, nb) in la.neurons.iter().zip(&lb.neurons) {
                    total += preference_distance(&na.p, &nb.p);
                }
            }
        }
    }
    total
}

/// Preferences of several models, computed in parallel.
pub fn cohort_preferences(clients: &[Model], probe: &ProbeSet) -> Result<Vec<Vec<LayerPreferences>>> {
    if let Some(first) = clients.first() {
        if clients.iter().any(|m| m.spec != first.spec) {
            return Err(Error::SpecMismatch("preference analysis".into()));
        }
    }
    clients.par_iter().map(|m| model_preferences(m, probe)).collect()
}

/// Sum over client pairs, hidden layers and neurons of the distance
/// between matching preference vectors.
pub fn alignment_distance(clients: &[Model], probe: &ProbeSet) -> Result<f64> {
    Ok(alignment_from_preferences(&cohort_preferences(clients, probe)?))
}

/// One row of `feature_encoding.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingRow {
    pub client: usize,
    pub layer: usize,
    pub neuron: usize,
    pub top_class: usize,
    pub p: Vec<f64>,
}

pub fn encoding_rows(client: usize, prefs: &[LayerPreferences], polarity: Polarity) -> Vec<EncodingRow> {
    prefs
        .iter()
        .flat_map(|l| l.neurons.iter())
        .map(|n| EncodingRow {
            client,
            layer: n.layer,
            neuron: n.neuron,
            top_class: n.top_class_with(polarity),
            p: n.p.clone(),
        })
        .collect()
}

/// Columns `client,layer,neuron,top_class,p0..p{C-1}`. Values are written
/// in shortest round-trip form, so reading back is lossless.
pub fn write_encoding_csv<W: Write>(w: W, class_count: usize, rows: &[EncodingRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["client".to_string(), "layer".into(), "neuron".into(), "top_class".into()];
    header.extend((0..class_count).map(|c| format!("p{c}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.client.to_string(), r.layer.to_string(), r.neuron.to_string(), r.top_class.to_string()];
        rec.extend(r.p.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_encoding_csv<R: Read>(r: R) -> Result<Vec<EncodingRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let bad = |line: usize, what: &str| Error::Metrics(format!("feature encoding row {line}: bad {what}"));
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(bad(line, "column count"));
        }
        let int = |i: usize, name: &str| rec[i].parse::<usize>().map_err(|_| bad(line, name));
        let p = (4..rec.len())
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad(line, "preference value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EncodingRow {
            client: int(0, "client")?,
            layer: int(1, "layer")?,
            neuron: int(2, "neuron")?,
            top_class: int(3, "top_class")?,
            p,
        });
    }
    Ok(rows)
}
