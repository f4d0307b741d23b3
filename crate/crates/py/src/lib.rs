//! Python bindings: run experiments, compare metrics and evaluate the cost
//! model from Python.

use std::fs::File;
use std::path::PathBuf;

use fed2_core::data::{partition_nxc, Dataset};
use fed2_core::experiment::{self, compare, load_config, parse_config, run_experiment};
use fed2_core::fed::read_metrics_csv;
use fed2_core::topology::{cost_centralized, cost_mesh, CostModelParams, SumRanges};
use fed2_core::{RngStream, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: fed2_core::Error) -> PyErr {
    match e {
        fed2_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn ranges(name: &str) -> PyResult<SumRanges> {
    match name {
        "literal" => Ok(SumRanges::Literal),
        "disjoint" => Ok(SumRanges::Disjoint),
        other => Err(PyValueError::new_err(format!("unknown ranges {other:?}, expected \"literal\" or \"disjoint\""))),
    }
}

/// Runs an experiment. `config` is a JSON string, or a path to a config or
/// manifest file when `is_path` is true. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None, seed=None, is_path=false))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    is_path: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = if is_path { load_config(config.as_ref()) } else { parse_config(config) }.map_err(err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = py.allow_threads(|| run_experiment(&cfg, out_dir.as_deref())).map_err(err)?;
    let metrics = &outcome.run.metrics;
    let d = PyDict::new(py);
    d.set_item("rounds", metrics.len())?;
    d.set_item("accuracy", metrics.iter().map(|m| m.accuracy).collect::<Vec<_>>())?;
    d.set_item("alignment_distance", metrics.last().and_then(|m| m.alignment_distance))?;
    d.set_item("cumulative_bytes", metrics.last().map_or(0, |m| m.cumulative_bytes))?;
    d.set_item("out_dir", outcome.out_dir)?;
    d.set_item("warnings", outcome.manifest.warnings)?;
    Ok(d)
}

/// Round-by-round comparison of two metrics.csv files as
/// `(round, accuracy_a, accuracy_b, accuracy_delta, alignment_delta)`.
#[pyfunction]
fn compare_metrics(a: PathBuf, b: PathBuf) -> PyResult<Vec<(usize, f64, f64, f64, Option<f64>)>> {
    let read = |p: &PathBuf| -> PyResult<_> {
        let f = File::open(p).map_err(|e| PyIOError::new_err(format!("{}: {e}", p.display())))?;
        read_metrics_csv(f).map_err(err)
    };
    let cmp = compare(&read(&a)?, &read(&b)?).map_err(err)?;
    Ok(cmp
        .rows
        .iter()
        .map(|r| (r.round, r.accuracy_a, r.accuracy_b, r.accuracy_delta, r.alignment_delta))
        .collect())
}

/// Per-node cost for the centralized and mesh topologies. `params` is the
/// JSON form of the cost parameters (layers, decoupled, weight_bits,
/// kernels, channels, structures, pruning, replication, nodes).
#[pyfunction]
#[pyo3(signature = (params, sum_ranges="literal"))]
fn cost(params: &str, sum_ranges: &str) -> PyResult<(f64, f64)> {
    let p: CostModelParams = serde_json::from_str(params).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = ranges(sum_ranges)?;
    Ok((cost_centralized(&p, r).map_err(err)?, cost_mesh(&p, r).map_err(err)?))
}

/// Class-skew split of `labels` into per-client index lists.
#[pyfunction]
#[pyo3(signature = (labels, classes, clients, classes_per_client, seed=0))]
fn nxc_partition(labels: Vec<usize>, classes: usize, clients: usize, classes_per_client: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let n = labels.len();
    let samples = Tensor::new(vec![n, 1], vec![0.0; n]).map_err(err)?;
    let ds = Dataset::new(samples, labels, classes).map_err(err)?;
    let mut rng = RngStream::new(seed, fed2_core::rng::streams::PARTITION);
    Ok(partition_nxc(&ds, clients, classes_per_client, &mut rng).map_err(err)?.clients)
}

#[pymodule]
fn fed2(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", experiment::VERSION)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(nxc_partition, m)?)?;
    Ok(())
}
