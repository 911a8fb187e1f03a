//! Agreement between predicted and rated complexity. Always computed in f64.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

fn check(c: &[f64], p: &[f64], need: usize) -> Result<(), MetricError> {
    if c.len() != p.len() {
        return Err(MetricError::LengthMismatch(c.len(), p.len()));
    }
    if c.len() < need {
        return Err(MetricError::TooFew { need, got: c.len() });
    }
    if !c.iter().all(|v| v.is_finite()) {
        return Err(MetricError::NonFinite("targets"));
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(MetricError::NonFinite("predictions"));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson's r between ratings `c` and predictions `p`.
pub fn pearson(c: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    check(c, p, 2)?;
    let (mc, mp) = (mean(c), mean(p));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in c.iter().zip(p) {
        let (dx, dy) = (x - mc, y - mp);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("first argument"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("second argument"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho: Pearson over average ranks.
pub fn spearman(c: &[f64], p: &[f64]) -> Result<f64, MetricError> {
    check(c, p, 2)?;
    pearson(&average_ranks(c), &average_ranks(p))
}

/// `(rmse, mae)` of the residuals `p - c`.
pub fn error_metrics(c: &[f64], p: &[f64]) -> Result<(f64, f64), MetricError> {
    check(c, p, 1)?;
    let n = c.len() as f64;
    let (mut sq, mut abs) = (0.0, 0.0);
    for (&x, &y) in c.iter().zip(p) {
        let r = y - x;
        sq += r * r;
        abs += r.abs();
    }
    Ok(((sq / n).sqrt(), abs / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub rmse: f64,
    pub mae: f64,
}

impl MetricReport {
    pub fn compute(targets: &[f64], predictions: &[f64]) -> Result<Self, MetricError> {
        let (rmse, mae) = error_metrics(targets, predictions)?;
        Ok(Self {
            n: targets.len(),
            pearson_r: pearson(targets, predictions)?,
            spearman_rho: spearman(targets, predictions)?,
            rmse,
            mae,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} pearson_r={:.4} spearman_rho={:.4} rmse={:.4} mae={:.4}",
            self.n, self.pearson_r, self.spearman_rho, self.rmse, self.mae
        )
    }
}
