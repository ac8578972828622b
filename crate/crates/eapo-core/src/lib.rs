//! Environment-adaptive preference optimization (EAPO) for long-tailed
//! binary classification under covariate shift.
//!
//! The pipeline has two stages. Stage 1 pretrains a scalar-logit classifier
//! by empirical risk minimization (binary cross-entropy or focal loss).
//! Stage 2 adapts it to a new input distribution without test labels: the
//! unlabeled test inputs retrieve their k nearest training records to form a
//! distribution-aligned local manifold and its label-1 extreme subset, and
//! the model is fine-tuned against its frozen pretrained snapshot with a
//! combined objective — supervised loss over the manifold plus preference
//! terms that push the true label's logit above its complement's, weighted
//! separately for the manifold and for the rare extreme events.
//!
//! Modules:
//! - [`data`]: datasets, table i/o, standardization, synthetic shift benchmark
//! - [`retrieval`]: k-nearest-neighbor manifold construction, preference pairs
//! - [`objectives`]: per-logit losses (bce, focal, preference, combined)
//! - [`model`]: logistic / multilayer-perceptron logit models, checkpoints
//! - [`training`]: Adam, pretraining, manifold fine-tuning
//! - [`evaluation`]: ROC-AUC, threshold selection, confusion metrics,
//!   intensity breakdown
//! - [`experiment`]: config-driven orchestration and run manifests

pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod training;

pub use error::{EapoError, Result};
