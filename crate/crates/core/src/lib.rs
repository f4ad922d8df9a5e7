//! Sample difficulty scoring in a pre-trained embedding space and
//! difficulty-aware entropy regularization for softmax classifiers.
//!
//! The pipeline is: load embeddings ([`embedding_store`]), fit the
//! class-conditional and class-agnostic Gaussians ([`gaussian`]), turn the
//! relative Mahalanobis distance into per-sample weights ([`difficulty`]),
//! train a softmax head with the weighted entropy regularizer
//! ([`classifier`]), and evaluate calibration, selective classification and
//! OOD detection ([`metrics`]). [`synthetic`] provides Gaussian-mixture
//! fixtures and perturbations for desk-scale experiments.

pub mod classifier;
pub mod difficulty;
pub mod embedding_store;
mod error;
pub mod gaussian;
mod io_util;
pub mod metrics;
pub mod rng;
pub mod synthetic;

pub use classifier::{ClassifierModel, LossConfig, LossKind, OptimConfig};
pub use difficulty::{DifficultyScores, ScoreMethod, ScorerTag};
pub use embedding_store::EmbeddingDataset;
pub use error::{Error, Result};
pub use gaussian::GaussianBank;
pub use metrics::EvalReport;
