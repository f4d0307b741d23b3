use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("group boundaries do not match channel count at {layer}: {detail}")]
    Groups { layer: String, detail: String },

    #[error("activation cache does not belong to this model state")]
    StaleCache,

    #[error("clients do not share a model spec: {0}")]
    SpecMismatch(String),

    #[error("inconsistent class-to-group map: {0}")]
    GroupMap(String),

    #[error("probe set is missing classes {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("malformed IDX file {path}: {detail}")]
    Idx { path: PathBuf, detail: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid partition request: {0}")]
    Partition(String),

    #[error("invalid cost-model parameters: {0}")]
    Cost(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid federation config: {0}")]
    Federation(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics file error: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
