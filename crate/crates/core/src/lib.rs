//! Gradient-leakage laboratory for the classification head of a language
//! model.
//!
//! The crate reconstructs the directions of the Pooler-layer inputs of a
//! batch from its averaged gradient report (Hermite-tensor estimation plus
//! symmetric tensor decomposition) and uses them as an extra supervisory
//! signal inside a gradient-inversion text-recovery search.
//!
//! Module map:
//! - [`model`]: hand-differentiated stand-in head (encoder, wide Pooler,
//!   classifier) and the attack-time weight initialization.
//! - [`tensor`]: Hermite tensors, moment estimators, symmetric
//!   decomposition.
//! - [`recon`]: end-to-end feature recovery and order/sign matching.
//! - [`prior`]: add-k n-gram prior used for perplexity scoring.
//! - [`attack`]: the initialization / continuous / token-swap pipeline.
//! - [`metrics`]: ROUGE F-scores and feature-cosine reports.
//! - [`data`]: vocabulary, tokenization, TSV datasets, synthetic batches.

// `!(x > 0.0)` is used on purpose: NaN must fail those checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod recon;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

pub use attack::{AttackConfig, AttackResult, FeaturePhase, GradMatchKind, MatchMode};
pub use data::{Dataset, Vocab};
pub use metrics::RougeScores;
pub use model::{Activation, Batch, GradientReport, HeadDims, LossKind, ModelParams};
pub use prior::NgramModel;
pub use recon::{Assignment, ReconConfig, ReconPath, RecoveredFeatures};
pub use tensor::{DecomposeMethod, Decomposition, SymTensor3};
