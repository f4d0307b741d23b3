//! Config-driven experiments: build data, partition and model, run the
//! federation and write reports plus a manifest that reproduces the run.

mod config;
mod report;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    load_config, parse_config, AnalysisConfig, CostConfig, DatasetConfig, ExperimentConfig, FederationBlock,
    ModelConfig, OutputsConfig, PartitionConfig,
};
pub use report::{class_color, compare, heatmap_svg, Comparison, ComparisonRow};

use crate::data::{load_idx, partition_dirichlet, partition_nxc, synth_gaussian, Dataset, Partition};
use crate::error::{Error, Result};
use crate::features::{cohort_preferences, encoding_rows, model_preferences, select_decouple_depth, write_encoding_csv, ProbeSet};
use crate::fed::{run_federation, write_metrics_csv, Analysis, FederationRun};
use crate::nn::write_checkpoint;
use crate::permutation::conflict_from_preferences;
use crate::rng::{streams, RngStream};
use crate::spec::ModelSpec;
use crate::topology::{cost_row, write_cost_csv, CostModelParams, CostRow};

/// Crate version plus the `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("FED2_GIT_DESCRIBE"));

pub const MANIFEST_VERSION: u32 = 1;

/// Data, partition, probe and model spec derived from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub probe: ProbeSet,
    pub spec: ModelSpec,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { classes, per_class, shape, separation, test_per_class } => {
            let mut rng = RngStream::new(cfg.seed, streams::DATA);
            let all = synth_gaussian(*classes, per_class + test_per_class, shape, *separation, &mut rng)?;
            all.split_per_class(*test_per_class, &mut RngStream::new(cfg.seed, streams::TEST_SPLIT))
        }
        DatasetConfig::Idx { images, labels, classes, test_images, test_labels, test_per_class } => {
            let train = load_idx(images, labels, *classes)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => Ok((train, load_idx(ti, tl, *classes)?)),
                _ => train.split_per_class(*test_per_class, &mut RngStream::new(cfg.seed, streams::TEST_SPLIT)),
            }
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = build_datasets(cfg)?;
    let spec = cfg.model_spec(train.sample_shape().to_vec())?;
    let mut prng = RngStream::new(cfg.seed, streams::PARTITION);
    let clients = cfg.federation.clients;
    let partition = match cfg.partition {
        PartitionConfig::Nxc { classes_per_client } => partition_nxc(&train, clients, classes_per_client, &mut prng)?,
        PartitionConfig::Dirichlet { alpha } => partition_dirichlet(&train, clients, alpha, &mut prng)?,
    };
    let a = &cfg.analysis;
    let probe = ProbeSet::from_dataset(&test, a.probe_batches, a.probe_batch_size, &mut RngStream::new(cfg.seed, streams::PROBE))?;
    Ok(Prepared { train, test, partition, probe, spec })
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub files: Vec<String>,
    /// Smallest hidden layer index whose final total variance crosses the
    /// configured threshold; a candidate shared depth.
    pub suggested_shared_depth: Option<usize>,
    pub warnings: Vec<String>,
}

pub struct Outcome {
    pub run: FederationRun,
    pub prepared: Prepared,
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Runs the experiment and writes its reports into `out_dir` (the config's
/// `outputs.dir` when `None`).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Outcome> {
    let prepared = prepare(cfg)?;
    let out_dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.outputs.dir.clone());
    fs::create_dir_all(&out_dir)?;
    let fed_cfg = cfg.federation_config();
    let analysis = Analysis {
        probe: &prepared.probe,
        every: cfg.analysis.every,
        polarity: cfg.analysis.polarity,
    };
    let run = run_federation(
        &fed_cfg,
        &prepared.spec,
        &prepared.train,
        &prepared.partition,
        &prepared.test,
        Some(analysis),
    )?;

    let mut files = vec!["metrics.csv".to_string()];
    write_metrics_csv(create(&out_dir, "metrics.csv")?, &run.metrics)?;

    let o = &cfg.outputs;
    let classes = prepared.spec.class_count;
    let client_prefs = if o.encodings || o.conflicts || o.heatmap || o.tv_profile {
        cohort_preferences(&run.clients, &prepared.probe)?
    } else {
        Vec::new()
    };
    if o.encodings {
        let rows: Vec<_> = client_prefs
            .iter()
            .enumerate()
            .flat_map(|(n, p)| encoding_rows(n, p, cfg.analysis.polarity))
            .collect();
        write_encoding_csv(create(&out_dir, "feature_encoding.csv")?, classes, &rows)?;
        files.push("feature_encoding.csv".into());
    }
    if o.conflicts {
        conflict_from_preferences(&client_prefs, cfg.analysis.polarity).write_csv(create(&out_dir, "conflicts.csv")?)?;
        files.push("conflicts.csv".into());
    }
    if o.heatmap {
        let enc: Vec<Vec<_>> = client_prefs
            .iter()
            .map(|c| c.iter().map(|l| l.encoding(cfg.analysis.polarity)).collect())
            .collect();
        fs::write(out_dir.join("heatmap.svg"), heatmap_svg(&enc, classes))?;
        files.push("heatmap.svg".into());
    }
    let mut suggested = None;
    if o.tv_profile {
        let global = model_preferences(&run.global, &prepared.probe)?;
        let mut w = csv::Writer::from_writer(create(&out_dir, "tv_profile.csv")?);
        w.write_record(["layer", "tv_global", "tv_client_mean"])?;
        let mut profile = Vec::new();
        for (li, g) in global.iter().enumerate() {
            let tv = g.total_variance();
            let mean = client_prefs.iter().map(|c| c[li].total_variance()).sum::<f64>() / client_prefs.len().max(1) as f64;
            profile.push(tv);
            w.write_record([g.layer.to_string(), tv.to_string(), mean.to_string()])?;
        }
        w.flush()?;
        if !profile.is_empty() {
            suggested = select_decouple_depth(&profile, cfg.analysis.tau)?;
        }
        files.push("tv_profile.csv".into());
    }
    if o.cost_sweep {
        write_cost_csv(create(&out_dir, "cost_sweep.csv")?, &cost_sweep(cfg, &prepared.spec)?)?;
        files.push("cost_sweep.csv".into());
    }
    if o.checkpoint {
        write_checkpoint(&run.global, create(&out_dir, "global.ckpt")?)?;
        files.push("global.ckpt".into());
    }

    let mut resolved = cfg.clone();
    resolved.outputs.dir = out_dir.clone();
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        version: VERSION.to_string(),
        seed: cfg.seed,
        config: resolved,
        files,
        suggested_shared_depth: suggested,
        warnings: run.warnings.clone(),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(Outcome { run, prepared, manifest, out_dir })
}

/// Cost rows over the config's parameter grid, using `spec`'s geometry.
pub fn cost_sweep(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<Vec<CostRow>> {
    let c = &cfg.cost;
    let base = CostModelParams::from_spec(spec, 0)?;
    let depths = c.decoupled.clone().unwrap_or_else(|| (0..=base.layers).collect());
    let nodes = c.nodes.clone().unwrap_or_else(|| vec![cfg.federation.clients as f64]);
    let mut rows = Vec::new();
    for &ranges in &c.ranges {
        for &d in &depths {
            for &p in &c.structures {
                for &f in &c.pruning {
                    for &r in &c.replication {
                        for &n in &nodes {
                            let params = CostModelParams {
                                decoupled: d,
                                weight_bits: c.weight_bits,
                                structures: p,
                                pruning: f,
                                replication: r,
                                nodes: n,
                                ..base.clone()
                            };
                            rows.push(cost_row(params, ranges).map_err(|e| Error::config("cost", e.to_string()))?);
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Writes only `cost_sweep.csv`; needs no training.
pub fn run_cost_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<CostRow>> {
    cfg.validate()?;
    let shape = match cfg.input_shape() {
        Some(s) => s,
        None => build_datasets(cfg)?.0.sample_shape().to_vec(),
    };
    let spec = cfg.model_spec(shape)?;
    let rows = cost_sweep(cfg, &spec)?;
    fs::create_dir_all(out_dir)?;
    write_cost_csv(create(out_dir, "cost_sweep.csv")?, &rows)?;
    Ok(rows)
}
