//! Multi-head attention multiple-instance learning for survival prediction
//! from bags of precomputed patch embeddings.
//!
//! The crate is organised by concern:
//!
//! - [`numerics`]: dense kernels, seeded random streams, k-means and a
//!   finite-difference gradient oracle.
//! - [`model`]: the multi-head attention aggregator, baseline aggregators and
//!   the checkpoint format.
//! - [`train`]: Cox partial-likelihood loss, batch-shared feature dropout,
//!   Adam with cosine restarts and the epoch loop.
//! - [`eval`]: concordance, Kaplan-Meier, log-rank, IPCW AUC and head-level
//!   analysis.
//! - [`cv`]: stratified folds, nested cross-validation and head-count ablation.
//! - [`data`]: bag and manifest formats, the background patch filter and the
//!   synthetic planted-signal generator.
//! - [`attnmap`]: attention-map export for a single slide.

pub mod attnmap;
pub mod cv;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use model::{
    ClusterAttnParams, EmbeddingBag, GatedAttnParams, Model, ModelKind, ModelParams, RiskHead,
    SurvivalModel,
};
pub use numerics::{DenseMatrix, RngStream};
pub use train::{PatientRecord, TrainConfig};
