//! Seeded synthetic feature sets with controllable dependence structure.
//!
//! Each branch is driven by its own latent vectors: one for the DINO vector
//! and one per ResNet block. Features are random linear mixtures of their
//! latent plus Gaussian noise, so branches and blocks are independent of
//! one another. The score is a logistic function of a random projection of
//! the selected latents plus noise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::{DatasetManifest, FeatureLayout, FeatureRecord};
use crate::model::Branch;

/// What the score depends on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Both,
    DinoOnly,
    ResnetOnly,
    /// Only this DINO dimension, which is drawn independently of the rest.
    DinoDim(usize),
    /// Only this ResNet block (0-based).
    ResnetBlock(usize),
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub layout: FeatureLayout,
    pub n_train: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    /// Standard deviation of per-feature noise.
    pub feature_noise: f64,
    /// Standard deviation of noise added to the standardized target.
    pub score_noise: f64,
    pub target: Target,
    /// Permute this branch's vectors across records, making it uninformative.
    pub shuffle_branch: Option<Branch>,
    /// DINO dimensions set to zero in every record.
    pub zero_dino_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            layout: FeatureLayout::default(),
            n_train: 2000,
            n_test: 500,
            latent_dim: 8,
            feature_noise: 0.5,
            score_noise: 0.1,
            target: Target::Both,
            shuffle_branch: None,
            zero_dino_dims: Vec::new(),
            seed: 0,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

/// `rows x latent` mixing matrix applied to `z`, plus noise.
fn mix(rng: &mut ChaCha8Rng, m: &[f64], z: &[f64], noise: f64, out: &mut Vec<f32>) {
    for row in m.chunks_exact(z.len()) {
        let v: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
        out.push((v + noise * normal(rng)) as f32);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(train, test)` manifests named `synthetic-train` and `synthetic-test`.
///
/// # Panics
/// When a target or zeroed dimension indexes outside the layout.
pub fn generate(spec: &SyntheticSpec) -> (DatasetManifest, DatasetManifest) {
    let layout = &spec.layout;
    let k = spec.latent_dim;
    let blocks = layout.block_dims.len();
    match spec.target {
        Target::DinoDim(j) => assert!(j < layout.dino_dim, "target dimension out of range"),
        Target::ResnetBlock(b) => assert!(b < blocks, "target block out of range"),
        _ => {}
    }
    assert!(spec.zero_dino_dims.iter().all(|&j| j < layout.dino_dim));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = (1.0 / k as f64).sqrt();
    let dino_mix = normals(&mut rng, layout.dino_dim * k, scale);
    let block_mix: Vec<Vec<f64>> = layout
        .block_dims
        .iter()
        .map(|&d| normals(&mut rng, d * k, scale))
        .collect();
    let dino_dir = normals(&mut rng, k, scale);
    let block_dirs: Vec<Vec<f64>> = (0..blocks).map(|_| normals(&mut rng, k, scale)).collect();

    let n = spec.n_train + spec.n_test;
    let mut records = Vec::with_capacity(n);
    let mut raw_targets = Vec::with_capacity(n);
    for i in 0..n {
        let zd = normals(&mut rng, k, 1.0);
        let zb: Vec<Vec<f64>> = (0..blocks).map(|_| normals(&mut rng, k, 1.0)).collect();
        let mut dino = Vec::with_capacity(layout.dino_dim);
        mix(&mut rng, &dino_mix, &zd, spec.feature_noise, &mut dino);
        let mut resnet = Vec::with_capacity(layout.resnet_dim());
        for (m, z) in block_mix.iter().zip(&zb) {
            mix(&mut rng, m, z, spec.feature_noise, &mut resnet);
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let resnet_signal = || {
            zb.iter()
                .zip(&block_dirs)
                .map(|(z, d)| dot(z, d))
                .sum::<f64>()
                / (blocks as f64).sqrt()
        };
        let t = match spec.target {
            Target::Both => (dot(&zd, &dino_dir) + resnet_signal()) / 2f64.sqrt(),
            Target::DinoOnly => dot(&zd, &dino_dir),
            Target::ResnetOnly => resnet_signal(),
            Target::DinoDim(j) => {
                let u = normal(&mut rng);
                dino[j] = u as f32;
                u
            }
            Target::ResnetBlock(b) => dot(&zb[b], &block_dirs[b]),
            Target::Constant(_) => 0.0,
        };
        for &j in &spec.zero_dino_dims {
            dino[j] = 0.0;
        }
        raw_targets.push(t);
        records.push(FeatureRecord {
            id: format!("syn-{i:06}"),
            dino,
            resnet,
            score: None,
        });
    }

    // standardize so the logistic link sees unit-scale inputs
    let mean = raw_targets.iter().sum::<f64>() / n as f64;
    let sd = (raw_targets
        .iter()
        .map(|t| (t - mean) * (t - mean))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    for (rec, t) in records.iter_mut().zip(&raw_targets) {
        rec.score = Some(match spec.target {
            Target::Constant(c) => c,
            _ => {
                let z = if sd > 0.0 { (t - mean) / sd } else { 0.0 };
                sigmoid(z + spec.score_noise * normal(&mut rng)) as f32
            }
        });
    }

    if let Some(branch) = spec.shuffle_branch {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let moved: Vec<Vec<f32>> = order
            .iter()
            .map(|&i| match branch {
                Branch::Dino => records[i].dino.clone(),
                Branch::Resnet => records[i].resnet.clone(),
            })
            .collect();
        for (rec, v) in records.iter_mut().zip(moved) {
            match branch {
                Branch::Dino => rec.dino = v,
                Branch::Resnet => rec.resnet = v,
            }
        }
    }

    let test_records = records.split_off(spec.n_train);
    let mut train = DatasetManifest::new("synthetic-train", layout.clone());
    train.records = records;
    let mut test = DatasetManifest::new("synthetic-test", layout.clone());
    test.records = test_records;
    (train, test)
}

/// Small layout for fast experiments.
pub fn compact_layout() -> FeatureLayout {
    FeatureLayout {
        dino_dim: 48,
        block_dims: vec![8, 16, 24, 32],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::validate_manifest;

    fn spec(target: Target) -> SyntheticSpec {
        SyntheticSpec {
            layout: compact_layout(),
            n_train: 40,
            n_test: 10,
            target,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn output_is_valid_and_deterministic() {
        let s = spec(Target::Both);
        let (a, b) = generate(&s);
        assert_eq!((a.len(), b.len()), (40, 10));
        assert!(validate_manifest(&a).is_empty() && validate_manifest(&b).is_empty());
        assert_eq!(generate(&s), (a, b));
    }

    #[test]
    fn zeroed_and_constant_options() {
        let mut s = spec(Target::Constant(0.25));
        s.zero_dino_dims = vec![3, 9];
        let (a, _) = generate(&s);
        assert!(a
            .records
            .iter()
            .all(|r| r.dino[3] == 0.0 && r.dino[9] == 0.0 && r.score == Some(0.25)));
    }

    #[test]
    fn shuffling_keeps_the_multiset_of_vectors() {
        let all = |(a, b): (DatasetManifest, DatasetManifest)| [a.records, b.records].concat();
        let base = all(generate(&spec(Target::Both)));
        let mut s = spec(Target::Both);
        s.shuffle_branch = Some(Branch::Dino);
        let shuffled = all(generate(&s));
        let key = |m: &[FeatureRecord]| {
            let mut v: Vec<Vec<u32>> = m
                .iter()
                .map(|r| r.dino.iter().map(|x| x.to_bits()).collect())
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&base), key(&shuffled));
        assert_ne!(base[0].dino, shuffled[0].dino);
        assert_eq!(base[0].resnet, shuffled[0].resnet);
    }
}
