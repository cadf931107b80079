//! Numerical laboratory for studying robust vs. non-robust feature learning
//! in patch-structured data with a two-layer smoothed-ReLU convolutional net.
//!
//! The crate provides:
//! - the synthetic patch-data model ([`features`]),
//! - the network, its losses and analytic gradients ([`network`]),
//! - full-batch standard and adversarial training loops ([`training`]),
//! - perturbation constructions and evaluators ([`attacks`]),
//! - theory-facing instrumentation: weight-feature decomposition, the
//!   coefficient recursions as a standalone oracle, and a tensor-power
//!   sequence check ([`diagnostics`]),
//! - a finite-difference gradient checker ([`gradcheck`]).
//!
//! All randomness flows through splittable counter-based streams ([`rng`]),
//! so every experiment is bit-reproducible from a single seed.

pub mod attacks;
pub mod diagnostics;
pub mod features;
pub mod gradcheck;
pub mod jsonfmt;
mod linalg;
pub mod network;
pub mod rng;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing generation metadata: {0}")]
    MissingMetadata(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("epoch grid mismatch: {0}")]
    GridMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// The two feature families attached to every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Robust,
    NonRobust,
}
