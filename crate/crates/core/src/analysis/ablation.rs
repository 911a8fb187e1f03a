use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use super::stats::{bh_fdr, permutation_test_delta};
use super::{scores, unit_seed, AnalysisConfig, AnalysisError};
use crate::features::DatasetManifest;
use crate::matrix::Matrix;
use crate::metrics::MetricReport;
use crate::model::{Ablation, Branch, DrexModel, Resnet};
use crate::scalar::Scalar;

const KIND_BRANCH: u64 = 1;
const KIND_DINO_DIM: u64 = 2;
const KIND_BLOCK: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub baseline: MetricReport,
    pub ablated: MetricReport,
    /// `ablated.pearson_r - baseline.pearson_r`.
    pub delta_r: f64,
    pub delta_rho: f64,
    pub p_value: f64,
    /// Benjamini–Hochberg decision within the family the result was tested in.
    pub fdr_significant: bool,
}

impl fmt::Display for AblationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: delta_r={:.4} delta_rho={:.4} p={:.4e} fdr_significant={} baseline_r={:.4} ablated_r={:.4}",
            self.name,
            self.delta_r,
            self.delta_rho,
            self.p_value,
            self.fdr_significant,
            self.baseline.pearson_r,
            self.ablated.pearson_r
        )
    }
}

/// Scores and baseline metrics shared by every unit of one analysis.
struct Baseline {
    targets: Vec<f64>,
    preds: Vec<f64>,
    report: MetricReport,
}

fn as_f64<T: Scalar>(preds: &[crate::model::Prediction<T>]) -> Vec<f64> {
    preds.iter().map(|p| p.score.as_f64()).collect()
}

fn baseline<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
) -> Result<Baseline, AnalysisError> {
    let targets = scores(set)?;
    let preds = as_f64(&model.predict_records(&set.records, Ablation::None)?);
    let report = MetricReport::compute(&targets, &preds)?;
    Ok(Baseline {
        targets,
        preds,
        report,
    })
}

fn compare(
    name: String,
    base: &Baseline,
    ablated: Vec<f64>,
    cfg: &AnalysisConfig,
    unit: u64,
) -> Result<AblationResult, AnalysisError> {
    let report = MetricReport::compute(&base.targets, &ablated)?;
    let test = permutation_test_delta(
        &ablated,
        &base.preds,
        &base.targets,
        cfg.n_perm,
        unit_seed(cfg.seed, unit),
    )?;
    Ok(AblationResult {
        name,
        baseline: base.report,
        ablated: report,
        delta_r: report.pearson_r - base.report.pearson_r,
        delta_rho: report.spearman_rho - base.report.spearman_rho,
        p_value: test.p_value,
        fdr_significant: false,
    })
}

fn with_fdr(
    mut results: Vec<AblationResult>,
    alpha: f64,
) -> Result<Vec<AblationResult>, AnalysisError> {
    let p: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    for (r, keep) in results.iter_mut().zip(bh_fdr(&p, alpha)?) {
        r.fdr_significant = keep;
    }
    Ok(results)
}

fn branch_unit(branch: Branch) -> u64 {
    KIND_BRANCH << 32
        | match branch {
            Branch::Dino => 0,
            Branch::Resnet => 1,
        }
}

/// Replaces one branch's projected embedding by zeros; attention is
/// recomputed from the zeroed embedding and the residual path keeps it.
pub fn ablate_branch<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
    branch: Branch,
    cfg: &AnalysisConfig,
) -> Result<AblationResult, AnalysisError> {
    let base = baseline(model, set)?;
    let preds = as_f64(&model.predict_records(&set.records, Ablation::Branch(branch))?);
    let r = compare(
        format!("branch:{branch}"),
        &base,
        preds,
        cfg,
        branch_unit(branch),
    )?;
    Ok(with_fdr(vec![r], cfg.alpha)?.remove(0))
}

/// Both branch ablations, FDR-corrected as one family.
pub fn ablate_branches<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
    cfg: &AnalysisConfig,
) -> Result<Vec<AblationResult>, AnalysisError> {
    let base = baseline(model, set)?;
    let results = [Branch::Dino, Branch::Resnet]
        .into_iter()
        .map(|b| {
            let preds = as_f64(&model.predict_records(&set.records, Ablation::Branch(b))?);
            compare(format!("branch:{b}"), &base, preds, cfg, branch_unit(b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    with_fdr(results, cfg.alpha)
}

fn check_dim<T: Scalar>(model: &DrexModel<T>, j: usize) -> Result<(), AnalysisError> {
    let d = model.config().dino_dim;
    if j >= d {
        return Err(AnalysisError::BadUnit(format!(
            "dino dimension {j} out of range 0..{d}"
        )));
    }
    Ok(())
}

fn check_block<T: Scalar>(model: &DrexModel<T>, block: usize) -> Result<(), AnalysisError> {
    let n = model.config().block_dims.len();
    if block == 0 || block > n {
        return Err(AnalysisError::BadUnit(format!(
            "resnet block {block} out of range 1..={n}"
        )));
    }
    Ok(())
}

/// Zeroes raw DINO dimension `j` (0-based) before projection.
pub fn ablate_dino_dim<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
    j: usize,
    cfg: &AnalysisConfig,
) -> Result<AblationResult, AnalysisError> {
    check_dim(model, j)?;
    let base = baseline(model, set)?;
    let preds = as_f64(&model.predict_records(&set.records, Ablation::DinoDim(j))?);
    let r = compare(
        format!("dino_dim:{j}"),
        &base,
        preds,
        cfg,
        KIND_DINO_DIM << 32 | j as u64,
    )?;
    Ok(with_fdr(vec![r], cfg.alpha)?.remove(0))
}

/// Every single-dimension DINO ablation, FDR-corrected as one family.
pub fn ablate_dino_dims<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
    cfg: &AnalysisConfig,
) -> Result<Vec<AblationResult>, AnalysisError> {
    let base = baseline(model, set)?;
    let (dino, resnet) = model.input_matrices(&set.records, Ablation::None)?;
    // the ResNet side is untouched by these ablations, so project it once
    let resnet_affine = model.resnet_affine_rows(&resnet)?;
    let results = (0..model.config().dino_dim)
        .into_par_iter()
        .map(|j| {
            let mut zeroed: Matrix<T> = dino.clone();
            zeroed.zero_columns(j, j + 1);
            let preds =
                as_f64(&model.predict_matrices(&zeroed, Resnet::Affine(&resnet_affine), None)?);
            compare(
                format!("dino_dim:{j}"),
                &base,
                preds,
                cfg,
                KIND_DINO_DIM << 32 | j as u64,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    with_fdr(results, cfg.alpha)
}

/// Zeroes ResNet block `block` (1-based) before projection.
pub fn ablate_resnet_block<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
    block: usize,
    cfg: &AnalysisConfig,
) -> Result<AblationResult, AnalysisError> {
    check_block(model, block)?;
    let base = baseline(model, set)?;
    let preds = as_f64(&model.predict_records(&set.records, Ablation::ResnetBlock(block - 1))?);
    let r = compare(
        format!("resnet_block:{block}"),
        &base,
        preds,
        cfg,
        KIND_BLOCK << 32 | block as u64,
    )?;
    Ok(with_fdr(vec![r], cfg.alpha)?.remove(0))
}

/// All block ablations, FDR-corrected as one family.
pub fn ablate_resnet_blocks<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
    cfg: &AnalysisConfig,
) -> Result<Vec<AblationResult>, AnalysisError> {
    let base = baseline(model, set)?;
    let results = (1..=model.config().block_dims.len())
        .map(|block| {
            let preds =
                as_f64(&model.predict_records(&set.records, Ablation::ResnetBlock(block - 1))?);
            compare(
                format!("resnet_block:{block}"),
                &base,
                preds,
                cfg,
                KIND_BLOCK << 32 | block as u64,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    with_fdr(results, cfg.alpha)
}
