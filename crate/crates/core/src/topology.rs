//! Collaboration topologies and communication cost models.
//!
//! `cost_centralized` and `cost_mesh` evaluate
//!
//! ```text
//! Q_cent = sum_{i=1}^{L-D} B_w f_{i+1} k_i^2 + P sum_{i=D}^{L} B_w f_{i+1} F_r k_i^2
//! Q_mesh = N sum_{i=1}^{L-D} B_w f_{i+1} k_i^2 + P (R-1) sum_{i=D}^{L} B_w f_{i+1} F_r k_i^2
//! ```
//!
//! The two index ranges overlap. [`SumRanges::Literal`] evaluates them as
//! printed, with the lower bound of the second sum raised to 1 since `k_0`
//! does not exist; [`SumRanges::Disjoint`] uses `1..=L-D` and `L-D+1..=L`
//! so every layer is counted once. The result carries the unit of `B_w`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::spec::{ModelSpec, OpPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Mesh,
}

/// Symmetric weighted adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyGraph {
    pub n: usize,
    /// Row-major `n x n` edge weights; zero means no edge.
    pub weights: Vec<f64>,
}

impl TopologyGraph {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    /// Edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = self.weight(i, j);
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn total_weight(&self) -> f64 {
        self.edges().iter().map(|e| e.2).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.weight(i, j) == self.weight(j, i)))
    }
}

/// Builds a ring (a path over `|i - j| = 1`, plus the `n-1 -- 0` edge when
/// `closed`) or a full mesh. `edge_cost(i, j)` is called with `i < j` and
/// must be positive.
pub fn build_topology(
    kind: TopologyKind,
    n: usize,
    closed: bool,
    edge_cost: impl Fn(usize, usize) -> f64,
) -> Result<TopologyGraph> {
    if n < 2 {
        return Err(Error::Topology(format!("need at least 2 nodes, got {n}")));
    }
    let mut weights = vec![0.0; n * n];
    let linked = |i: usize, j: usize| match kind {
        TopologyKind::Mesh => true,
        TopologyKind::Ring => j - i == 1 || (closed && i == 0 && j == n - 1),
    };
    for i in 0..n {
        for j in i + 1..n {
            if !linked(i, j) {
                continue;
            }
            let w = edge_cost(i, j);
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Topology(format!("edge {i}-{j} has non-positive cost {w}")));
            }
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(TopologyGraph { n, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumRanges {
    #[default]
    Literal,
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Total layer count `L`.
    pub layers: usize,
    /// Decoupled layer count `D`.
    pub decoupled: usize,
    /// Weight precision `B_w`.
    pub weight_bits: f64,
    /// Kernel widths `k_1..k_L`.
    pub kernels: Vec<usize>,
    /// Channel counts `f_1..f_{L+1}`.
    pub channels: Vec<usize>,
    /// Structures per node `P`.
    pub structures: f64,
    /// Pruning ratio `F_r`.
    pub pruning: f64,
    /// Replication factor `R`.
    pub replication: f64,
    /// Node count `N`.
    pub nodes: f64,
}

impl CostModelParams {
    /// Layer geometry of a model spec: every weighted layer counts, dense
    /// layers with kernel width 1; `f_1` is the input channel count.
    pub fn from_spec(spec: &ModelSpec, decoupled: usize) -> Result<Self> {
        let mut kernels = Vec::new();
        let mut channels = vec![spec.input_shape[0]];
        for op in spec.plan()? {
            match op {
                OpPlan::Conv { kernel, out_channels, .. } => {
                    kernels.push(kernel);
                    channels.push(out_channels);
                }
                OpPlan::Dense { out_features, .. } => {
                    kernels.push(1);
                    channels.push(out_features);
                }
                _ => {}
            }
        }
        Ok(CostModelParams {
            layers: kernels.len(),
            decoupled,
            weight_bits: 64.0,
            kernels,
            channels,
            structures: 1.0,
            pruning: 1.0,
            replication: 1.0,
            nodes: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Cost(m));
        if self.layers == 0 {
            return err("L must be at least 1".into());
        }
        if self.decoupled > self.layers {
            return err(format!("D = {} exceeds L = {}", self.decoupled, self.layers));
        }
        if self.kernels.len() != self.layers {
            return err(format!("{} kernel widths for L = {}", self.kernels.len(), self.layers));
        }
        if self.channels.len() != self.layers + 1 {
            return err(format!("{} channel counts, need L + 1 = {}", self.channels.len(), self.layers + 1));
        }
        if !(self.pruning > 0.0 && self.pruning <= 1.0) {
            return err(format!("F_r = {} outside (0, 1]", self.pruning));
        }
        if !(self.replication >= 1.0) {
            return err(format!("R = {} below 1", self.replication));
        }
        if !(self.weight_bits >= 0.0 && self.structures >= 0.0 && self.nodes >= 0.0) {
            return err("B_w, P and N must be non-negative".into());
        }
        Ok(())
    }

    /// `sum_{i=lo}^{hi} B_w f_{i+1} k_i^2` with 1-based `i`.
    fn layer_sum(&self, lo: usize, hi: usize) -> f64 {
        (lo.max(1)..=hi)
            .map(|i| self.weight_bits * self.channels[i] as f64 * (self.kernels[i - 1] * self.kernels[i - 1]) as f64)
            .sum()
    }

    /// The shared-part and decoupled-part sums.
    fn sums(&self, ranges: SumRanges) -> Result<(f64, f64)> {
        self.validate()?;
        let (l, d) = (self.layers, self.decoupled);
        let shared = self.layer_sum(1, l - d);
        let rest = match ranges {
            SumRanges::Literal => self.layer_sum(d, l),
            SumRanges::Disjoint => self.layer_sum(l - d + 1, l),
        };
        Ok((shared, rest))
    }
}

/// Data downloaded by one node under centralized collaboration.
pub fn cost_centralized(p: &CostModelParams, ranges: SumRanges) -> Result<f64> {
    let (shared, rest) = p.sums(ranges)?;
    Ok(shared + p.structures * p.pruning * rest)
}

/// Per-node cost under mesh collaboration with replication `R`.
pub fn cost_mesh(p: &CostModelParams, ranges: SumRanges) -> Result<f64> {
    let (shared, rest) = p.sums(ranges)?;
    Ok(p.nodes * shared + p.structures * (p.replication - 1.0) * p.pruning * rest)
}

/// One row of `cost_sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub params: CostModelParams,
    pub ranges: SumRanges,
    pub centralized: f64,
    pub mesh: f64,
}

pub fn cost_row(params: CostModelParams, ranges: SumRanges) -> Result<CostRow> {
    Ok(CostRow {
        centralized: cost_centralized(&params, ranges)?,
        mesh: cost_mesh(&params, ranges)?,
        params,
        ranges,
    })
}

pub fn write_cost_csv<W: Write>(w: W, rows: &[CostRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "L", "D", "B_w", "P", "F_r", "R", "N", "ranges", "q_centralized", "q_mesh",
    ])?;
    for r in rows {
        let p = &r.params;
        let ranges = match r.ranges {
            SumRanges::Literal => "literal",
            SumRanges::Disjoint => "disjoint",
        };
        out.write_record([
            p.layers.to_string(),
            p.decoupled.to_string(),
            p.weight_bits.to_string(),
            p.structures.to_string(),
            p.pruning.to_string(),
            p.replication.to_string(),
            p.nodes.to_string(),
            ranges.to_string(),
            r.centralized.to_string(),
            r.mesh.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Bytes per exchanged scalar.
pub const SCALAR_BYTES: u64 = 8;

/// Scalars a client exchanges in one direction. `present` masks decoupled
/// groups; `None` ships the whole model.
pub fn exchanged_scalars(model: &Model, present: Option<&[bool]>) -> usize {
    let mut total = 0;
    for layer in &model.layers {
        let Layer::Param(p) = layer else { continue };
        match present {
            Some(mask) if p.decoupled => {
                for (g, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    let outs = p.out_groups[g].len();
                    let running = if p.running.is_some() { 2 * outs } else { 0 };
                    total += p.weight_block(g).len() + outs + running;
                }
            }
            _ => total += p.exchanged_len(),
        }
    }
    total
}

/// Upload plus download bytes of one round for every client.
pub fn round_traffic(model: &Model, masks: Option<&[Vec<bool>]>, clients: usize) -> u64 {
    let scalars: usize = match masks {
        None => clients * exchanged_scalars(model, None),
        Some(m) => m.iter().map(|mask| exchanged_scalars(model, Some(mask))).sum(),
    };
    2 * scalars as u64 * SCALAR_BYTES
}

/// Cumulative traffic after each of `rounds` rounds.
pub fn attach_cost_tracking(model: &Model, masks: Option<&[Vec<bool>]>, clients: usize, rounds: usize) -> Vec<u64> {
    let per = round_traffic(model, masks, clients);
    (1..=rounds as u64).map(|r| r * per).collect()
}
