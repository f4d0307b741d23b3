//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Polarity;
use crate::fed::{Aggregation, FederationConfig, Pairing};
use crate::spec::{adapt, LayerDesc, ModelSpec};
use crate::topology::SumRanges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian class templates plus unit noise.
    Synthetic {
        classes: usize,
        /// Training samples per class.
        per_class: usize,
        /// Sample shape, e.g. `[1, 8, 8]`.
        shape: Vec<usize>,
        separation: f64,
        /// Test samples per class, drawn from the same templates.
        test_per_class: usize,
    },
    /// IDX image/label files. Without test files, `test_per_class` samples
    /// per class are held out of the training files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        test_per_class: usize,
    },
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { classes, .. } | DatasetConfig::Idx { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Nxc { classes_per_client: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layers; the logit layer is added automatically.
    pub layers: Vec<LayerDesc>,
    /// Leading weighted layers kept shared. Omit for an unadapted model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_depth: Option<usize>,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationBlock {
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

fn default_probe_batches() -> usize {
    4
}

fn default_every() -> usize {
    1
}

fn default_tau() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Probe batches per class.
    #[serde(default = "default_probe_batches")]
    pub probe_batches: usize,
    #[serde(default = "default_batch")]
    pub probe_batch_size: usize,
    /// Analyse local models every this many rounds (the last round is
    /// always analysed); 0 analyses only the last round.
    #[serde(default = "default_every")]
    pub every: usize,
    #[serde(default)]
    pub polarity: Polarity,
    /// Relative threshold for the suggested decoupling depth.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            probe_batches: default_probe_batches(),
            probe_batch_size: default_batch(),
            every: default_every(),
            polarity: Polarity::default(),
            tau: default_tau(),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub encodings: bool,
    #[serde(default = "yes")]
    pub conflicts: bool,
    #[serde(default = "yes")]
    pub tv_profile: bool,
    #[serde(default = "yes")]
    pub cost_sweep: bool,
    #[serde(default = "yes")]
    pub heatmap: bool,
    #[serde(default)]
    pub checkpoint: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig {
            dir: default_out(),
            encodings: true,
            conflicts: true,
            tv_profile: true,
            cost_sweep: true,
            heatmap: true,
            checkpoint: false,
        }
    }
}

fn default_bits() -> f64 {
    64.0
}

fn unit_list() -> Vec<f64> {
    vec![1.0]
}

fn default_ranges() -> Vec<SumRanges> {
    vec![SumRanges::Literal, SumRanges::Disjoint]
}

/// Parameter grid for `cost_sweep.csv`. Layer geometry comes from the
/// model; every combination of the listed values is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default = "default_bits")]
    pub weight_bits: f64,
    #[serde(default = "unit_list")]
    pub structures: Vec<f64>,
    #[serde(default = "unit_list")]
    pub pruning: Vec<f64>,
    #[serde(default = "unit_list")]
    pub replication: Vec<f64>,
    /// Defaults to the federation's client count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<f64>>,
    /// Defaults to every depth from 0 to L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoupled: Option<Vec<usize>>,
    #[serde(default = "default_ranges")]
    pub ranges: Vec<SumRanges>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            weight_bits: default_bits(),
            structures: unit_list(),
            pruning: unit_list(),
            replication: unit_list(),
            nodes: None,
            decoupled: None,
            ranges: default_ranges(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub federation: FederationBlock,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

/// Parses JSON, reporting the field path of the first problem.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "(root)".to_string() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file, or the `config` member of a run manifest, and
/// resolves relative dataset paths against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::config("(root)", e.to_string()))?;
    let text = match value.get("config") {
        Some(inner) if value.get("manifest_version").is_some() => inner.to_string(),
        _ => text,
    };
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            clients: f.clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            aggregation: f.aggregation,
            pairing: f.pairing,
            seed: self.seed,
        }
    }

    /// Input shape the dataset will produce.
    pub fn input_shape(&self) -> Option<Vec<usize>> {
        match &self.dataset {
            DatasetConfig::Synthetic { shape, .. } => Some(shape.clone()),
            DatasetConfig::Idx { .. } => None,
        }
    }

    /// Model spec for the given input shape, adapted when `shared_depth`
    /// is set.
    pub fn model_spec(&self, input_shape: Vec<usize>) -> Result<ModelSpec> {
        let base = ModelSpec::new(input_shape, self.model.layers.clone(), self.dataset.classes());
        let spec = match self.model.shared_depth {
            Some(d) => adapt(&base, d, self.model.groups).map_err(|e| Error::config("model", e.to_string()))?,
            None => base,
        };
        spec.plan().map_err(|e| Error::config("model.layers", e.to_string()))?;
        Ok(spec)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetConfig::Idx { images, labels, test_images, test_labels, .. } = &mut self.dataset {
            fix(images);
            fix(labels);
            test_images.as_mut().map(fix);
            test_labels.as_mut().map(fix);
        }
    }

    /// Semantic checks that need more than one field.
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::config(path, msg));
        let classes = self.dataset.classes();
        if classes < 2 {
            return fail("dataset.classes", format!("need at least 2 classes, got {classes}"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { per_class, shape, separation, test_per_class, .. } => {
                if *per_class == 0 {
                    return fail("dataset.per_class", "must be at least 1".into());
                }
                if shape.is_empty() || shape.contains(&0) {
                    return fail("dataset.shape", format!("{shape:?} is not a valid sample shape"));
                }
                if !separation.is_finite() || *separation < 0.0 {
                    return fail("dataset.separation", format!("{separation} must be finite and non-negative"));
                }
                if *test_per_class == 0 {
                    return fail("dataset.test_per_class", "must be at least 1".into());
                }
            }
            DatasetConfig::Idx { test_images, test_labels, test_per_class, .. } => {
                if test_images.is_some() != test_labels.is_some() {
                    return fail("dataset.test_labels", "test_images and test_labels go together".into());
                }
                if test_images.is_none() && *test_per_class == 0 {
                    return fail("dataset.test_per_class", "needed when no test files are given".into());
                }
            }
        }
        let f = &self.federation;
        if f.clients == 0 {
            return fail("federation.clients", "must be at least 1".into());
        }
        if f.rounds == 0 {
            return fail("federation.rounds", "must be at least 1".into());
        }
        if f.local_epochs == 0 {
            return fail("federation.local_epochs", "must be at least 1".into());
        }
        if f.batch_size == 0 {
            return fail("federation.batch_size", "must be at least 1".into());
        }
        if !(f.lr >= 0.0) || !f.lr.is_finite() {
            return fail("federation.lr", format!("{} must be finite and non-negative", f.lr));
        }
        match &self.partition {
            PartitionConfig::Nxc { classes_per_client: c } => {
                if *c == 0 || *c > classes {
                    return fail("partition.classes_per_client", format!("{c} outside [1, {classes}]"));
                }
            }
            PartitionConfig::Dirichlet { alpha } => {
                if !(*alpha > 0.0) || !alpha.is_finite() {
                    return fail("partition.alpha", format!("{alpha} must be positive"));
                }
            }
        }
        if self.model.groups == 0 || self.model.groups > classes {
            return fail("model.groups", format!("{} outside [1, {classes}]", self.model.groups));
        }
        if self.model.shared_depth.is_none() && self.model.groups != 1 {
            return fail("model.groups", "groups need shared_depth".into());
        }
        let a = &self.analysis;
        if a.probe_batches == 0 || a.probe_batch_size == 0 {
            return fail("analysis.probe_batches", "probe needs at least one sample per class".into());
        }
        if !(a.tau > 0.0 && a.tau < 1.0) {
            return fail("analysis.tau", format!("{} outside (0, 1)", a.tau));
        }
        if self.cost.ranges.is_empty() {
            return fail("cost.ranges", "list at least one range variant".into());
        }
        if let Some(shape) = self.input_shape() {
            self.model_spec(shape)?;
        }
        Ok(())
    }
}
