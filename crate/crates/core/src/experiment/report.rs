//! Heatmaps and run comparisons.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::features::LayerEncoding;
use crate::fed::RoundMetrics;

/// Categorical palette, cycled when there are more classes than colors.
const PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

const CELL: usize = 12;
const LABEL: usize = 70;

/// One panel per layer; within a panel one row per client and one cell per
/// neuron, filled with the color of the neuron's top class.
/// `clients[n]` holds client `n`'s encodings in layer order.
pub fn heatmap_svg(clients: &[Vec<LayerEncoding>], class_count: usize) -> String {
    let layers = clients.first().map_or(0, |c| c.len());
    let widest = clients
        .iter()
        .flat_map(|c| c.iter().map(|l| l.top_class.len()))
        .max()
        .unwrap_or(0);
    let panel_h = (clients.len() + 2) * CELL;
    let width = LABEL + widest * CELL + CELL;
    let legend_y = layers * panel_h + CELL;
    let height = legend_y + 2 * CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}" font-family="sans-serif" font-size="9">"#,
        w = width.max(LABEL + class_count * 3 * CELL)
    );
    for li in 0..layers {
        let top = li * panel_h;
        let name = clients[0][li].layer;
        let _ = writeln!(s, r#"<text x="2" y="{}">layer {name}</text>"#, top + CELL - 2);
        for (n, enc) in clients.iter().enumerate() {
            let y = top + (n + 1) * CELL;
            let _ = writeln!(s, r#"<text x="2" y="{}">client {n}</text>"#, y + CELL - 3);
            for (i, &c) in enc[li].top_class.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>neuron {i}: class {c}</title></rect>"#,
                    LABEL + i * CELL,
                    class_color(c)
                );
            }
        }
    }
    for c in 0..class_count {
        let x = LABEL + c * 3 * CELL;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{legend_y}" width="{CELL}" height="{CELL}" fill="{}"/><text x="{}" y="{}">{c}</text>"#,
            class_color(c),
            x + CELL + 2,
            legend_y + CELL - 2
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Round-by-round difference of run `b` minus run `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub round: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub accuracy_delta: f64,
    pub alignment_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn final_delta(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.accuracy_delta)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["round", "accuracy_a", "accuracy_b", "accuracy_delta", "alignment_delta"])?;
        for r in &self.rows {
            out.write_record([
                r.round.to_string(),
                r.accuracy_a.to_string(),
                r.accuracy_b.to_string(),
                r.accuracy_delta.to_string(),
                r.alignment_delta.map_or(String::new(), |d| d.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>10} {:>10} {:>10} {:>12}\n",
            "round", "acc_a", "acc_b", "delta", "align_delta"
        );
        for r in &self.rows {
            let align = r.alignment_delta.map_or("-".to_string(), |d| format!("{d:.4}"));
            let _ = writeln!(
                s,
                "{:>6} {:>10.4} {:>10.4} {:>+10.4} {:>12}",
                r.round, r.accuracy_a, r.accuracy_b, r.accuracy_delta, align
            );
        }
        let _ = writeln!(s, "final accuracy delta: {:+.4}", self.final_delta());
        s
    }
}

pub fn compare(a: &[RoundMetrics], b: &[RoundMetrics]) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::Metrics(format!("round counts differ: {} vs {}", a.len(), b.len())));
    }
    let rows = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x.round != y.round {
                return Err(Error::Metrics(format!("round {} paired with round {}", x.round, y.round)));
            }
            Ok(ComparisonRow {
                round: x.round,
                accuracy_a: x.accuracy,
                accuracy_b: y.accuracy,
                accuracy_delta: y.accuracy - x.accuracy,
                alignment_delta: match (x.alignment_distance, y.alignment_distance) {
                    (Some(p), Some(q)) => Some(q - p),
                    _ => None,
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { rows })
}
