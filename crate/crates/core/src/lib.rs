//! Retraining-free compression of sparse mixture-of-experts (SMoE) layers.
//!
//! Experts are grouped by the similarity of their mean outputs on a
//! calibration batch (agglomerative clustering, average linkage by default)
//! and each group is collapsed into a single expert in weight space. The
//! router is left untouched; routing slots of merged experts are redirected
//! to the merged expert.
//!
//! The crate also carries the comparison baselines (frequency, router-score
//! and output-deviation pruning, one-shot router-logit grouping, K-means,
//! fuzzy C-means), cluster validity metrics, exhaustive partition oracles and
//! a planted-redundancy generator for checking all of it on small models.

pub mod baselines;
pub mod calibration;
pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod merging;
pub mod moe;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use moe::{ExpertWeights, MoeLayer, MoeModel, TokenBatch};
pub use tensor::Matrix;
