//! Multiclass gradient-boosted decision trees over 696-feature vectors.
//!
//! Training is softmax boosting with one tree per class per iteration,
//! histogram split search on quantile-binned features and leaf-wise growth.
//! Trees keep raw-valued thresholds, so inference never touches the bins.

mod binning;
mod eval;
mod model;
mod split;
mod train;
mod tree;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;

pub use binning::BinMapper;
pub use eval::{confusion_matrix, EvalReport};
pub use model::{GbtModel, MODEL_MAGIC, MODEL_VERSION};
pub use split::{find_best_split, split_gain, HistBin, Histogram, SplitConstraints, SplitInfo};
pub use train::{train, train_with_report, TrainReport};
pub use tree::{DecisionTree, Node};

pub const N_CLASSES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum GbtError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFiniteFeature { row: usize, column: usize },
    #[error("expected {expected} features, got {found}")]
    WrongFeatureCount { expected: usize, found: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("model format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("model checksum failure (truncated or corrupted file)")]
    ChecksumFailure,
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(String),
}

impl From<ContainerError> for GbtError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::VersionMismatch { found, expected } => {
                GbtError::VersionMismatch { found, expected }
            }
            ContainerError::ChecksumFailure => GbtError::ChecksumFailure,
            other => GbtError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_iterations: u32,
    pub learning_rate: f64,
    pub max_leaves: u32,
    pub min_samples_per_leaf: u32,
    pub n_histogram_bins: u16,
    pub l2_lambda: f64,
    pub rng_seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_iterations: 100,
            learning_rate: 0.1,
            max_leaves: 31,
            min_samples_per_leaf: 20,
            n_histogram_bins: 256,
            l2_lambda: 1.0,
            rng_seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<(), GbtError> {
        let bad = |m: &str| Err(GbtError::InvalidParams(m.to_string()));
        if self.n_iterations < 1 {
            return bad("n_iterations must be at least 1");
        }
        if !(2..=4096).contains(&self.max_leaves) {
            return bad("max_leaves must lie in [2, 4096]");
        }
        if !(2..=256).contains(&self.n_histogram_bins) {
            return bad("n_histogram_bins must lie in [2, 256]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be non-negative");
        }
        if self.min_samples_per_leaf < 1 {
            return bad("min_samples_per_leaf must be at least 1");
        }
        Ok(())
    }
}
