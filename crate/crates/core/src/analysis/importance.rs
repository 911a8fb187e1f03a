use serde::Serialize;

use super::stats::{skewness_test, SkewnessTest};
use super::{scores, AnalysisConfig, AnalysisError};
use crate::features::{DatasetManifest, FeatureRecord};
use crate::metrics::pearson;
use crate::model::{Ablation, DrexModel};
use crate::scalar::Scalar;

/// Anything that can report `d prediction / d dino` per record.
pub trait DinoSaliency {
    fn dino_dim(&self) -> usize;

    /// One gradient row per record, each of length [`DinoSaliency::dino_dim`].
    fn dino_gradients(&self, records: &[FeatureRecord]) -> Result<Vec<Vec<f64>>, AnalysisError>;
}

impl<T: Scalar> DinoSaliency for DrexModel<T> {
    fn dino_dim(&self) -> usize {
        self.config().dino_dim
    }

    fn dino_gradients(&self, records: &[FeatureRecord]) -> Result<Vec<Vec<f64>>, AnalysisError> {
        let (dino, resnet) = self.input_matrices(records, Ablation::None)?;
        let (_, grads) = self.dino_input_gradients(&dino, &resnet)?;
        Ok(grads
            .iter_rows()
            .map(|row| row.iter().map(|g| g.as_f64()).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceProfile {
    /// Mean over records of `|d prediction / d x_j * x_j|`.
    pub importance: Vec<f64>,
    pub skewness: f64,
    pub skewness_p: f64,
}

/// Gradient-times-activation importance of every raw DINO dimension.
pub fn grad_importance(
    model: &impl DinoSaliency,
    set: &DatasetManifest,
    cfg: &AnalysisConfig,
) -> Result<ImportanceProfile, AnalysisError> {
    if set.is_empty() {
        return Err(AnalysisError::Empty("evaluation"));
    }
    let d = model.dino_dim();
    let grads = model.dino_gradients(&set.records)?;
    let mut sums = vec![0.0f64; d];
    for (rec, g) in set.records.iter().zip(&grads) {
        for ((s, &gj), &xj) in sums.iter_mut().zip(g).zip(&rec.dino) {
            *s += (gj * f64::from(xj)).abs();
        }
    }
    let n = set.len() as f64;
    let importance: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    let SkewnessTest { g1, p_value } = skewness_test(&importance, cfg.n_boot, cfg.seed)?;
    Ok(ImportanceProfile {
        importance,
        skewness: g1,
        skewness_p: p_value,
    })
}

/// Pearson correlation between the DINO attention weight and the rated score.
pub fn attention_weight_correlation<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
) -> Result<f64, AnalysisError> {
    let targets = scores(set)?;
    let preds = model.predict_records(&set.records, Ablation::None)?;
    let w_d: Vec<f64> = preds.iter().map(|p| p.w_d.as_f64()).collect();
    Ok(pearson(&w_d, &targets)?)
}
