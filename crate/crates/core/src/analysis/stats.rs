//! Significance machinery: paired-swap permutation test on a correlation
//! difference, Benjamini–Hochberg step-up, and sample skewness with a
//! sign-symmetry bootstrap.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Permutations drawn from one random stream.
const PERMS_PER_STREAM: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Correlation of many vectors against one fixed target.
struct Correlator {
    centered: Vec<f64>,
    norm: f64,
}

impl Correlator {
    fn new(target: &[f64]) -> Result<Self, StatsError> {
        let n = target.len() as f64;
        let mean = target.iter().sum::<f64>() / n;
        let centered: Vec<f64> = target.iter().map(|t| t - mean).collect();
        let ss = centered.iter().map(|c| c * c).sum::<f64>();
        if !(ss > 0.0) {
            return Err(StatsError::Degenerate("targets have zero variance".into()));
        }
        Ok(Self {
            centered,
            norm: ss.sqrt(),
        })
    }

    /// Pearson r from the running sums of `x`; zero when `x` is constant.
    fn r(&self, n: f64, sum: f64, sum_sq: f64, cross: f64) -> f64 {
        let sxx = sum_sq - sum * sum / n;
        if sxx > 0.0 {
            cross / (sxx.sqrt() * self.norm)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermutationOutcome {
    /// `r(a, targets) - r(b, targets)`.
    pub delta: f64,
    pub p_value: f64,
    /// Permutations with `|delta_perm| >= |delta|`.
    pub exceed: usize,
    pub n_perm: usize,
}

/// Two-sided paired-swap permutation test of `r(a, t) - r(b, t)`.
///
/// Each permutation swaps `(a_i, b_i)` independently with probability 1/2.
/// `p = (1 + exceed) / (n_perm + 1)`.
pub fn permutation_test_delta(
    preds_a: &[f64],
    preds_b: &[f64],
    targets: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationOutcome, StatsError> {
    let n = targets.len();
    if preds_a.len() != n || preds_b.len() != n {
        return Err(StatsError::Length(format!(
            "{} / {} predictions for {n} targets",
            preds_a.len(),
            preds_b.len()
        )));
    }
    if n < 3 {
        return Err(StatsError::TooFew { need: 3, got: n });
    }
    if n_perm == 0 {
        return Err(StatsError::Invalid("n_perm must be at least 1".into()));
    }
    if preds_a
        .iter()
        .chain(preds_b)
        .chain(targets)
        .any(|v| !v.is_finite())
    {
        return Err(StatsError::Invalid("non-finite input".into()));
    }
    let corr = Correlator::new(targets)?;
    let nf = n as f64;
    let sums = |x: &[f64]| {
        let s = x.iter().sum::<f64>();
        let q = x.iter().map(|v| v * v).sum::<f64>();
        let c = x
            .iter()
            .zip(&corr.centered)
            .map(|(v, t)| v * t)
            .sum::<f64>();
        (s, q, c)
    };
    let (sa, qa, ca) = sums(preds_a);
    let (sb, qb, cb) = sums(preds_b);
    for (name, s, q) in [("first", sa, qa), ("second", sb, qb)] {
        if !(q - s * s / nf > 0.0) {
            return Err(StatsError::Degenerate(format!(
                "{name} prediction set has zero variance"
            )));
        }
    }
    let delta = corr.r(nf, sa, qa, ca) - corr.r(nf, sb, qb, cb);

    // Swapping pair i moves (a_i - b_i) between the two sets' sums.
    let diff: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let (a, b) = (preds_a[i], preds_b[i]);
            (a - b, a * a - b * b, (a - b) * corr.centered[i])
        })
        .collect();
    let observed = delta.abs();
    let streams = n_perm.div_ceil(PERMS_PER_STREAM);
    let exceed: usize = (0..streams)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let count = PERMS_PER_STREAM.min(n_perm - stream * PERMS_PER_STREAM);
            let mut hits = 0;
            for _ in 0..count {
                let (mut s_a, mut q_a, mut c_a) = (sa, qa, ca);
                let (mut s_b, mut q_b, mut c_b) = (sb, qb, cb);
                for block in diff.chunks(64) {
                    let bits = rng.next_u64();
                    for (k, &(ds, dq, dc)) in block.iter().enumerate() {
                        if bits >> k & 1 == 1 {
                            s_a -= ds;
                            q_a -= dq;
                            c_a -= dc;
                            s_b += ds;
                            q_b += dq;
                            c_b += dc;
                        }
                    }
                }
                let d = corr.r(nf, s_a, q_a, c_a) - corr.r(nf, s_b, q_b, c_b);
                if d.abs() >= observed - tolerance(observed) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(PermutationOutcome {
        delta,
        p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
        exceed,
        n_perm,
    })
}

/// Slack for comparing a recomputed statistic against the observed one: the
/// incremental sums reorder floating-point additions, so a permutation that
/// reproduces the observed assignment can land an ulp or so below it.
fn tolerance(observed: f64) -> f64 {
    1e-12 * observed.max(1.0)
}

/// Benjamini–Hochberg step-up: reject the `k` smallest p-values, `k` the
/// largest rank with `p_(k) <= k * alpha / m`.
pub fn bh_fdr(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, StatsError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(StatsError::Invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    if let Some(p) = p_values.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(StatsError::Invalid(format!("p-value {p} outside (0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let cutoff = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * alpha / m as f64)
        .unwrap_or(0);
    let mut mask = vec![false; m];
    for &i in &order[..cutoff] {
        mask[i] = true;
    }
    Ok(mask)
}

fn central_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    (m2, m3)
}

fn adjusted_skewness(n: f64, m2: f64, m3: f64) -> f64 {
    (n * (n - 1.0)).sqrt() / (n - 2.0) * m3 / m2.powf(1.5)
}

/// Adjusted Fisher–Pearson skewness `G1`.
pub fn sample_skewness(x: &[f64]) -> Result<f64, StatsError> {
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("non-finite value".into()));
    }
    let (m2, m3) = central_moments(x);
    if !(m2 > 0.0) {
        return Err(StatsError::Degenerate("all values are equal".into()));
    }
    Ok(adjusted_skewness(x.len() as f64, m2, m3))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewnessTest {
    pub g1: f64,
    pub p_value: f64,
}

/// `G1` with a two-sided bootstrap p-value for the null of symmetry:
/// resample deviations from the mean with replacement, flip each sign at
/// random, and count resamples at least as skewed as observed.
pub fn skewness_test(x: &[f64], n_boot: usize, seed: u64) -> Result<SkewnessTest, StatsError> {
    let g1 = sample_skewness(x)?;
    if n_boot == 0 {
        return Err(StatsError::Invalid("n_boot must be at least 1".into()));
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let nf = n as f64;
    let streams = n_boot.div_ceil(PERMS_PER_STREAM);
    let exceed: usize = (0..streams)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let count = PERMS_PER_STREAM.min(n_boot - stream * PERMS_PER_STREAM);
            let mut sample = vec![0.0; n];
            let mut hits = 0;
            for _ in 0..count {
                for s in sample.iter_mut() {
                    let d = dev[rng.random_range(0..n)];
                    *s = if rng.random::<bool>() { d } else { -d };
                }
                let (m2, m3) = central_moments(&sample);
                if m2 > 0.0 && adjusted_skewness(nf, m2, m3).abs() >= g1.abs() {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(SkewnessTest {
        g1,
        p_value: (1 + exceed) as f64 / (n_boot + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pearson;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn identical_predictions_give_p_one() {
        let t = normals(1, 50);
        let a = normals(2, 50);
        let out = permutation_test_delta(&a, &a, &t, 999, 7).unwrap();
        assert_eq!(out.delta, 0.0);
        assert_eq!(out.p_value, 1.0);
    }

    #[test]
    fn perfect_vs_random_hits_the_floor() {
        let t = normals(3, 200);
        let noise = normals(4, 200);
        let out = permutation_test_delta(&t, &noise, &t, 9999, 1).unwrap();
        assert_eq!(out.p_value, 1.0 / 10_000.0);
    }

    #[test]
    fn observed_delta_matches_direct_correlations() {
        let t = normals(5, 80);
        let a: Vec<f64> = t
            .iter()
            .zip(normals(6, 80))
            .map(|(x, e)| x + 0.5 * e)
            .collect();
        let b = normals(7, 80);
        let out = permutation_test_delta(&a, &b, &t, 10, 0).unwrap();
        let direct = pearson(&t, &a).unwrap() - pearson(&t, &b).unwrap();
        assert!((out.delta - direct).abs() < 1e-12);
    }

    #[test]
    fn permutation_errors() {
        let t = normals(1, 10);
        assert!(matches!(
            permutation_test_delta(&t, &t[..9], &t, 10, 0),
            Err(StatsError::Length(_))
        ));
        assert!(matches!(
            permutation_test_delta(&t, &t, &t, 0, 0),
            Err(StatsError::Invalid(_))
        ));
        let flat = vec![1.0; 10];
        assert!(matches!(
            permutation_test_delta(&t, &flat, &t, 10, 0),
            Err(StatsError::Degenerate(_))
        ));
        assert!(matches!(
            permutation_test_delta(&t, &t, &flat, 10, 0),
            Err(StatsError::Degenerate(_))
        ));
    }

    #[test]
    fn permutation_is_seed_deterministic() {
        let t = normals(8, 60);
        let a: Vec<f64> = t
            .iter()
            .zip(normals(9, 60))
            .map(|(x, e)| x + 2.0 * e)
            .collect();
        let b: Vec<f64> = t
            .iter()
            .zip(normals(10, 60))
            .map(|(x, e)| x + 2.5 * e)
            .collect();
        let p1 = permutation_test_delta(&a, &b, &t, 2000, 42).unwrap();
        assert_eq!(p1, permutation_test_delta(&a, &b, &t, 2000, 42).unwrap());
        assert!(p1.p_value > 0.0 && p1.p_value < 1.0);
    }

    #[test]
    fn bh_worked_example() {
        let mask = bh_fdr(&[0.001, 0.02, 0.04, 0.9], 0.05).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
        assert_eq!(bh_fdr(&[1.0; 5], 0.05).unwrap(), vec![false; 5]);
        assert_eq!(bh_fdr(&[0.05], 0.05).unwrap(), vec![true]);
        // step-up: a passing larger rank rescues smaller ones
        assert_eq!(bh_fdr(&[0.03, 0.04], 0.04).unwrap(), vec![true, true]);
        assert!(bh_fdr(&[0.0], 0.05).is_err());
        assert!(bh_fdr(&[1.5], 0.05).is_err());
        assert!(bh_fdr(&[0.5], 0.0).is_err());
        assert!(bh_fdr(&[], 0.05).unwrap().is_empty());
    }

    #[test]
    fn skewness_cases() {
        assert_eq!(sample_skewness(&[-1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!(sample_skewness(&[0.0, 0.0, 0.0, 10.0]).unwrap() > 0.0);
        // reference values from an independent statistics package
        assert!((sample_skewness(&[0.0, 0.0, 0.0, 10.0]).unwrap() - 2.0).abs() < 1e-12);
        let g = sample_skewness(&[1.0, 2.0, 3.0, 10.0, 4.0, -2.0, 7.0]).unwrap();
        assert!((g - 0.423_517_369_228_297_6).abs() < 1e-12);
        assert!(matches!(
            sample_skewness(&[1.0, 1.0, 1.0]),
            Err(StatsError::Degenerate(_))
        ));
        assert!(matches!(
            sample_skewness(&[1.0, 2.0]),
            Err(StatsError::TooFew { .. })
        ));
    }

    fn chi_square_one(seed: u64) -> Vec<f64> {
        normals(seed, 10_000).iter().map(|z| z * z).collect()
    }

    #[test]
    fn chi_square_one_skewness() {
        let x = chi_square_one(2024);
        let g1 = sample_skewness(&x).unwrap();
        assert!((g1 - 8f64.sqrt()).abs() < 0.2, "g1 = {g1}");
        let test = skewness_test(&x, 999, 3).unwrap();
        assert_eq!(test.p_value, 1.0 / 1000.0);
    }

    #[test]
    fn chi_square_one_skewness_on_average() {
        let mean = (100..120u64)
            .map(|s| sample_skewness(&chi_square_one(s)).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!((mean - 8f64.sqrt()).abs() < 0.1, "mean g1 = {mean}");
    }

    #[test]
    fn symmetric_sample_is_not_significant() {
        let x = normals(12, 400);
        let test = skewness_test(&x, 999, 3).unwrap();
        assert!(test.p_value > 0.05, "p = {}", test.p_value);
    }

    proptest! {
        #[test]
        fn bh_is_monotone_in_alpha(p in prop::collection::vec(1e-6f64..=1.0, 1..40), a1 in 1e-4f64..0.5, extra in 0.0f64..0.5) {
            let a2 = (a1 + extra).min(1.0);
            let lo = bh_fdr(&p, a1).unwrap();
            let hi = bh_fdr(&p, a2).unwrap();
            for (l, h) in lo.iter().zip(&hi) {
                prop_assert!(!l || *h);
            }
        }

        #[test]
        fn permutation_p_lies_on_the_grid(seed in 0u64..500, n_perm in 1usize..300) {
            let t = normals(seed, 30);
            let a: Vec<f64> = t.iter().zip(normals(seed + 1, 30)).map(|(x, e)| x + e).collect();
            let b = normals(seed + 2, 30);
            let out = permutation_test_delta(&a, &b, &t, n_perm, seed).unwrap();
            let k = out.p_value * (n_perm + 1) as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(out.p_value > 0.0 && out.p_value <= 1.0);
        }
    }
}
