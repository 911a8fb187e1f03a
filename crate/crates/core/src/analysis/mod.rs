//! Post-hoc analyses of a trained model: feature ablations with permutation
//! significance and FDR control, input-gradient importance, and attention
//! weight correlation.

pub mod ablation;
pub mod importance;
pub mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DatasetManifest;
use crate::metrics::MetricError;
use crate::model::ModelError;

pub use ablation::{
    ablate_branch, ablate_branches, ablate_dino_dim, ablate_dino_dims, ablate_resnet_block,
    ablate_resnet_blocks, AblationResult,
};
pub use importance::{
    attention_weight_correlation, grad_importance, DinoSaliency, ImportanceProfile,
};
pub use stats::{bh_fdr, permutation_test_delta, sample_skewness, skewness_test, StatsError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("record `{0}` has no score")]
    MissingScore(String),
    #[error("{0}")]
    BadUnit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Shared settings for significance testing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n_perm: usize,
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_perm: 10_000,
            n_boot: 10_000,
            alpha: 0.01,
            seed: 0,
        }
    }
}

pub(crate) fn scores(set: &DatasetManifest) -> Result<Vec<f64>, AnalysisError> {
    if set.is_empty() {
        return Err(AnalysisError::Empty("evaluation"));
    }
    set.scores().map_err(AnalysisError::MissingScore)
}

/// Independent seed for unit `unit` of an analysis.
pub(crate) fn unit_seed(base: u64, unit: u64) -> u64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(unit);
    rng.random()
}
