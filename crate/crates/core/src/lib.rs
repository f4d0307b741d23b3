//! Federated learning simulation with feature-aligned group averaging.
//!
//! The crate bundles a small deterministic network engine ([`nn`]),
//! grouped structural adaptation ([`spec`]), feature interpretation
//! ([`features`]), permutation tooling ([`permutation`]), the federated
//! round engine ([`fed`]), data generation and non-IID partitioning
//! ([`data`]), topology cost models ([`topology`]) and the config-driven
//! experiment runner ([`experiment`]).

pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod features;
pub mod nn;
pub mod permutation;
pub mod rng;
pub mod spec;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use nn::{GradientSet, LayerKind, LayerParams, Mode, Model};
pub use rng::RngStream;
pub use spec::{adapt, assign_classes, GroupAssignment, LayerDesc, ModelSpec, NormKind};
pub use tensor::Tensor;
