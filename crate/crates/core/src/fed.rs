//! Federated rounds: local SGD on clients, server aggregation by plain
//! coordinate averaging or by group-paired averaging, per-round metrics.
//!
//! Averages are taken in ascending client order relative to the first
//! contributor: `x_0 + (sum_n (x_n - x_0)) / N`. This is the arithmetic
//! mean, and averaging identical copies returns them bit for bit.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::features::{alignment_from_preferences, cohort_preferences, Polarity, ProbeSet};
use crate::nn::{Layer, LayerParams, Mode, Model};
use crate::permutation::conflict_from_preferences;
use crate::rng::{streams, RngStream};
use crate::spec::{GroupAssignment, ModelSpec};
use crate::tensor::Tensor;
use crate::topology::attach_cost_tracking;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fed2")]
    Fed2,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::Fed2 => "fed2",
        }
    }
}

/// Which clients take part in averaging a decoupled group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Every client: all clients carry the same server-issued class-to-group
    /// map, so every group is paired across the whole cohort.
    #[default]
    All,
    /// Only clients holding at least one sample of the group's classes.
    Data,
}

fn default_epochs() -> usize {
    1
}

fn default_lr() -> f64 {
    0.05
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub aggregation: Aggregation,
    #[serde(default)]
    pub pairing: Pairing,
    #[serde(default)]
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Federation(m.into()));
        if self.clients == 0 {
            return err("clients must be at least 1");
        }
        if self.rounds == 0 {
            return err("rounds must be at least 1");
        }
        if self.local_epochs == 0 {
            return err("local_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return err("lr must be a finite non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub round: usize,
    /// Global model accuracy on the test set.
    pub accuracy: f64,
    /// Each client's local model accuracy on the test set.
    pub client_accuracy: Vec<f64>,
    /// Feature alignment distance of the local models, when analysed.
    pub alignment_distance: Option<f64>,
    /// Mean top-class disagreement of the local models, when analysed.
    pub conflict: Option<f64>,
    pub cumulative_bytes: u64,
}

fn check_cohort(clients: &[Model]) -> Result<&Model> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Federation("no client models to aggregate".into()))?;
    for (n, m) in clients.iter().enumerate().skip(1) {
        if !m.same_structure(first) {
            return Err(Error::SpecMismatch(format!("client {n} differs from client 0")));
        }
    }
    Ok(first)
}

/// Shifted mean of `xs[n][range]` written into `out[range]`.
fn mean_into(out: &mut [f64], xs: &[&[f64]], range: std::ops::Range<usize>) {
    let n = xs.len() as f64;
    for i in range {
        let x0 = xs[0][i];
        let mut s = 0.0;
        for x in xs {
            s += x[i] - x0;
        }
        out[i] = x0 + s / n;
    }
}

/// Views of one tensor across a cohort.
fn parts<'a>(params: &[&'a LayerParams], pick: impl Fn(&'a LayerParams) -> &'a Tensor) -> Vec<&'a [f64]> {
    params.iter().map(|p| pick(p).data()).collect()
}

fn average_layer(
    target: &mut LayerParams,
    params: &[&LayerParams],
    out_ranges: &[std::ops::Range<usize>],
    weight_ranges: &[std::ops::Range<usize>],
) {
    let w = parts(params, |p| &p.weight);
    let b = parts(params, |p| &p.bias);
    for r in weight_ranges {
        mean_into(target.weight.data_mut(), &w, r.clone());
    }
    for r in out_ranges {
        mean_into(target.bias.data_mut(), &b, r.clone());
    }
    if target.running.is_some() {
        let m = parts(params, |p| &p.running.as_ref().expect("same structure").mean);
        let v = parts(params, |p| &p.running.as_ref().expect("same structure").var);
        let run = target.running.as_mut().expect("checked");
        for r in out_ranges {
            mean_into(run.mean.data_mut(), &m, r.clone());
            mean_into(run.var.data_mut(), &v, r.clone());
        }
    }
}

/// Coordinate-wise mean of every parameter and running statistic.
pub fn fedavg_aggregate(clients: &[Model]) -> Result<Model> {
    let first = check_cohort(clients)?;
    let mut out = first.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let Layer::Param(target) = layer else { continue };
        let params: Vec<&LayerParams> = clients.iter().map(|m| m.layers[i].params().expect("same structure")).collect();
        let all_w = vec![0..target.weight.len()];
        let all_o = vec![0..target.bias.len()];
        average_layer(target, &params, &all_o, &all_w);
    }
    Ok(out)
}

/// Shared layers are averaged over every client. Decoupled group `g` is
/// averaged over the clients whose presence mask includes `g`; a group no
/// client holds keeps `prev_global`'s values.
pub fn fed2_aggregate(clients: &[Model], assignment: &GroupAssignment, prev_global: &Model) -> Result<Model> {
    let first = check_cohort(clients)?;
    if !prev_global.same_structure(first) {
        return Err(Error::SpecMismatch("previous global model differs from the clients".into()));
    }
    for (n, m) in clients.iter().enumerate() {
        let map = m.spec.assignment()?;
        if map.class_to_group() != assignment.class_to_group() {
            return Err(Error::GroupMap(format!("client {n} maps classes to groups differently")));
        }
    }
    if assignment.presence().len() != clients.len() {
        return Err(Error::GroupMap(format!(
            "{} presence masks for {} clients",
            assignment.presence().len(),
            clients.len()
        )));
    }
    let mut out = prev_global.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let Layer::Param(target) = layer else { continue };
        let params: Vec<&LayerParams> = clients.iter().map(|m| m.layers[i].params().expect("same structure")).collect();
        if !target.decoupled {
            let all_w = vec![0..target.weight.len()];
            let all_o = vec![0..target.bias.len()];
            average_layer(target, &params, &all_o, &all_w);
            continue;
        }
        if target.out_groups.len() != assignment.num_groups() {
            return Err(Error::GroupMap(format!(
                "layer {i} has {} groups, assignment has {}",
                target.out_groups.len(),
                assignment.num_groups()
            )));
        }
        for g in 0..assignment.num_groups() {
            let holders: Vec<&LayerParams> = params
                .iter()
                .enumerate()
                .filter(|(n, _)| assignment.is_present(*n, g))
                .map(|(_, p)| *p)
                .collect();
            if holders.is_empty() {
                continue;
            }
            let og = target.out_groups[g].clone();
            let wb = target.weight_block(g);
            average_layer(target, &holders, &[og], &[wb]);
        }
    }
    Ok(out)
}

/// Local model after receiving the global shared layers and the global
/// values of the groups in `mask`; other groups keep their local values.
pub fn broadcast(global: &Model, local: &Model, mask: &[bool]) -> Result<Model> {
    if !global.same_structure(local) {
        return Err(Error::SpecMismatch("broadcast target differs from global".into()));
    }
    let mut out = local.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let Layer::Param(p) = layer else { continue };
        let src = global.layers[i].params().expect("same structure");
        if !p.decoupled {
            *p = src.clone();
            continue;
        }
        for (g, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let og = p.out_groups[g].clone();
            let wb = p.weight_block(g);
            p.weight.data_mut()[wb.clone()].copy_from_slice(&src.weight.data()[wb]);
            p.bias.data_mut()[og.clone()].copy_from_slice(&src.bias.data()[og.clone()]);
            if let (Some(r), Some(s)) = (p.running.as_mut(), src.running.as_ref()) {
                r.mean.data_mut()[og.clone()].copy_from_slice(&s.mean.data()[og.clone()]);
                r.var.data_mut()[og.clone()].copy_from_slice(&s.var.data()[og]);
            }
        }
    }
    Ok(out)
}

/// `epochs` shuffled passes of mini-batch SGD over `shard`.
pub fn local_train(
    model: &Model,
    shard: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Model> {
    if shard.is_empty() {
        return Err(Error::Federation("empty shard".into()));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Federation("epochs and batch size must be positive".into()));
    }
    let mut m = model.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let (x, y) = shard.batch(chunk)?;
            let cache = m.forward(&x, Mode::Train)?;
            let (_, grads) = m.backward(&cache, &y)?;
            m.update_running_stats(&cache);
            m.sgd_step(&grads, lr)?;
        }
    }
    Ok(m)
}

/// Fraction of `ds` classified correctly (lowest index wins ties).
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = ds.batch(chunk)?;
        let logits = model.predict(&x)?;
        for (row, &label) in logits.data().chunks(logits.row_len()).zip(&y) {
            correct += usize::from(crate::features::argmax(row) == label);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Everything a finished federation produced.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub global: Model,
    /// Final local models, in client order.
    pub clients: Vec<Model>,
    pub warnings: Vec<String>,
}

/// Per-round feature analysis of the local models.
#[derive(Debug, Clone, Copy)]
pub struct Analysis<'a> {
    pub probe: &'a ProbeSet,
    /// Analyse every this many rounds; the last round is always analysed.
    pub every: usize,
    pub polarity: Polarity,
}

impl Analysis<'_> {
    fn due(&self, round: usize, rounds: usize) -> bool {
        round == rounds || (self.every > 0 && round % self.every == 0)
    }
}

/// Runs `cfg.rounds` rounds: broadcast, parallel local training from
/// independent per-client streams, aggregation in client order, evaluation.
pub fn run_federation(
    cfg: &FederationConfig,
    spec: &ModelSpec,
    train: &Dataset,
    partition: &Partition,
    test: &Dataset,
    analysis: Option<Analysis<'_>>,
) -> Result<FederationRun> {
    cfg.validate()?;
    if partition.client_count() != cfg.clients {
        return Err(Error::Federation(format!(
            "partition has {} clients, config has {}",
            partition.client_count(),
            cfg.clients
        )));
    }
    partition.validate(train)?;
    let mut warnings = partition.warnings.clone();
    let shards: Vec<Option<Dataset>> = partition
        .clients
        .iter()
        .enumerate()
        .map(|(n, idx)| {
            if idx.is_empty() {
                warnings.push(format!("client {n} has an empty shard and is skipped"));
                Ok(None)
            } else {
                train.subset(idx).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    let mut global = Model::instantiate(spec, &mut RngStream::new(cfg.seed, streams::INIT))?;
    let assignment = match cfg.pairing {
        Pairing::All => spec.assignment()?.with_full_presence(cfg.clients),
        Pairing::Data => spec.assignment()?.with_presence(&partition.client_classes(train))?,
    };
    let masks = match cfg.aggregation {
        Aggregation::FedAvg => None,
        Aggregation::Fed2 => Some(assignment.presence()),
    };
    let traffic = attach_cost_tracking(&global, masks, cfg.clients, cfg.rounds);
    let mut locals = vec![global.clone(); cfg.clients];
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let starts: Vec<Model> = match cfg.aggregation {
            Aggregation::FedAvg => vec![global.clone(); cfg.clients],
            Aggregation::Fed2 => locals
                .iter()
                .enumerate()
                .map(|(n, l)| broadcast(&global, l, &assignment.presence()[n]))
                .collect::<Result<_>>()?,
        };
        let trained: Vec<Option<Model>> = starts
            .par_iter()
            .zip(shards.par_iter())
            .enumerate()
            .map(|(n, (start, shard))| {
                let Some(shard) = shard else { return Ok(None) };
                let mut rng = RngStream::new(cfg.seed, streams::client_round(n, round));
                local_train(start, shard, cfg.local_epochs, cfg.lr, cfg.batch_size, &mut rng).map(Some)
            })
            .collect::<Result<_>>()?;

        let active: Vec<usize> = (0..cfg.clients).filter(|&n| trained[n].is_some()).collect();
        for (n, t) in trained.into_iter().enumerate() {
            if let Some(m) = t {
                locals[n] = m;
            }
        }
        if !active.is_empty() {
            let cohort: Vec<Model> = active.iter().map(|&n| locals[n].clone()).collect();
            global = match cfg.aggregation {
                Aggregation::FedAvg => fedavg_aggregate(&cohort)?,
                Aggregation::Fed2 => {
                    let masks = active.iter().map(|&n| assignment.presence()[n].clone()).collect();
                    let sub = assignment.clone().with_presence_masks(masks)?;
                    fed2_aggregate(&cohort, &sub, &global)?
                }
            };
        }

        let acc = accuracy(&global, test)?;
        let client_accuracy = locals
            .par_iter()
            .map(|m| accuracy(m, test))
            .collect::<Result<Vec<_>>>()?;
        let (alignment_distance, conflict) = match analysis {
            Some(a) if a.due(round + 1, cfg.rounds) => {
                let prefs = cohort_preferences(&locals, a.probe)?;
                (
                    Some(alignment_from_preferences(&prefs)),
                    Some(conflict_from_preferences(&prefs, a.polarity).mean()),
                )
            }
            _ => (None, None),
        };
        metrics.push(RoundMetrics {
            round: round + 1,
            accuracy: acc,
            client_accuracy,
            alignment_distance,
            conflict,
            cumulative_bytes: traffic[round],
        });
    }
    Ok(FederationRun { metrics, global, clients: locals, warnings })
}

/// Writes `metrics.csv`: `round,accuracy,alignment_distance,conflict,
/// cumulative_bytes,client_0..client_{N-1}`. Missing analyses are empty
/// cells.
pub fn write_metrics_csv<W: Write>(w: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let clients = metrics.first().map_or(0, |m| m.client_accuracy.len());
    let mut header: Vec<String> = ["round", "accuracy", "alignment_distance", "conflict", "cumulative_bytes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..clients).map(|n| format!("client_{n}")));
    out.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for m in metrics {
        let mut rec = vec![
            m.round.to_string(),
            m.accuracy.to_string(),
            opt(m.alignment_distance),
            opt(m.conflict),
            m.cumulative_bytes.to_string(),
        ];
        rec.extend(m.client_accuracy.iter().map(|a| a.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<RoundMetrics>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Metrics(format!("missing column `{name}`")))
    };
    let (c_round, c_acc, c_align, c_conf, c_bytes) = (
        col("round")?,
        col("accuracy")?,
        col("alignment_distance")?,
        col("conflict")?,
        col("cumulative_bytes")?,
    );
    let client_cols: Vec<usize> = (0..)
        .map_while(|n| headers.iter().position(|h| h == format!("client_{n}")))
        .collect();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |name: &str| Error::Metrics(format!("row {}: bad `{name}` value", line + 1));
        let num = |i: usize, name: &str| rec[i].parse::<f64>().map_err(|_| bad(name));
        let opt = |i: usize, name: &str| {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i, name).map(Some)
            }
        };
        out.push(RoundMetrics {
            round: rec[c_round].parse().map_err(|_| bad("round"))?,
            accuracy: num(c_acc, "accuracy")?,
            client_accuracy: client_cols.iter().map(|&i| num(i, "client")).collect::<Result<_>>()?,
            alignment_distance: opt(c_align, "alignment_distance")?,
            conflict: opt(c_conf, "conflict")?,
            cumulative_bytes: rec[c_bytes].parse().map_err(|_| bad("cumulative_bytes"))?,
        });
    }
    Ok(out)
}
