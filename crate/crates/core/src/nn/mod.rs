//! Minimal deterministic network engine over a fixed layer set.

mod checkpoint;
mod layers;
mod model;
pub(crate) mod ops;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{dense_forward, group_conv_forward, group_norm_forward};
pub use model::{
    softmax_cross_entropy, ActivationCache, Backprop, FeaturePoint, GradientSet, Layer,
    LayerKind, LayerParams, Mode, Model, ParamGrad, RunningStats,
};
