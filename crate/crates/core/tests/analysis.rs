mod common;

use common::{compact_model, compact_spec, quick_train};
use drex::analysis::{
    ablate_branch, ablate_dino_dims, ablate_resnet_block, ablate_resnet_blocks,
    attention_weight_correlation, bh_fdr, grad_importance, permutation_test_delta, AnalysisConfig,
    AnalysisError, DinoSaliency,
};
use drex::features::{DatasetManifest, FeatureRecord};
use drex::matrix::Matrix;
use drex::metrics::MetricError;
use drex::model::Resnet;
use drex::synthetic::{generate, SyntheticSpec, Target};
use drex::trainer::train;
use drex::{Ablation, Branch, FusionConfig, Model, Model64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fit(spec: &SyntheticSpec) -> (Model, DatasetManifest) {
    let (tr, te) = generate(spec);
    let (trained, _) = train::<f32>(
        &compact_model(&tr.layout, 0),
        &quick_train(0),
        &tr,
        None,
        &mut |_| {},
    )
    .unwrap();
    (trained.eval_model(), te)
}

/// Full-width architecture on the compact layout.
fn fit_full_width(spec: &SyntheticSpec) -> (Model, DatasetManifest) {
    let (tr, te) = generate(spec);
    let mcfg = FusionConfig {
        dino_dim: tr.layout.dino_dim,
        block_dims: tr.layout.block_dims.clone(),
        ..FusionConfig::default()
    };
    let (trained, _) = train::<f32>(&mcfg, &quick_train(0), &tr, None, &mut |_| {}).unwrap();
    (trained.eval_model(), te)
}

/// Target carried by the ResNet side alone, DINO vectors permuted across records.
fn dino_control(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        shuffle_branch: Some(Branch::Dino),
        ..compact_spec(Target::ResnetOnly, seed)
    }
}

fn quick_cfg() -> AnalysisConfig {
    AnalysisConfig {
        n_perm: 1000,
        n_boot: 1000,
        ..AnalysisConfig::default()
    }
}

#[test]
fn uninformative_branch_ablation_is_harmless() {
    let (model, te) = fit_full_width(&dino_control(21));
    let r = ablate_branch(&model, &te, Branch::Dino, &quick_cfg()).unwrap();
    assert!(r.delta_r.abs() < 0.02, "{r}");
}

#[test]
fn fdr_flags_no_dimension_of_an_ignored_branch() {
    let (model, te) = fit_full_width(&dino_control(33));
    let results = ablate_dino_dims(&model, &te, &AnalysisConfig::default()).unwrap();
    let flagged: Vec<&str> = results
        .iter()
        .filter(|r| r.fdr_significant)
        .map(|r| r.name.as_str())
        .collect();
    assert!(flagged.is_empty(), "{flagged:?}");
}

#[test]
fn informative_branch_ablation_destroys_accuracy() {
    let (model, te) = fit(&compact_spec(Target::DinoOnly, 22));
    let r = ablate_branch(&model, &te, Branch::Dino, &quick_cfg()).unwrap();
    assert!(r.delta_r < -0.5, "{r}");
    assert!(r.p_value <= 1.0 / 1001.0 + 1e-15);
}

#[test]
fn target_dimension_is_singled_out_and_flagged() {
    let (model, te) = fit(&compact_spec(Target::DinoDim(7), 23));
    let cfg = AnalysisConfig::default();
    let results = ablate_dino_dims(&model, &te, &cfg).unwrap();
    assert_eq!(results.len(), 48);
    let worst = (0..48)
        .min_by(|&a, &b| results[a].delta_r.total_cmp(&results[b].delta_r))
        .unwrap();
    assert_eq!(worst, 7);
    assert!(results[7].fdr_significant, "{}", results[7]);
    assert_eq!(results[7].p_value, 1.0 / 10_001.0);
}

#[test]
fn target_block_is_the_most_damaging() {
    let (model, te) = fit(&compact_spec(Target::ResnetBlock(2), 24));
    let results = ablate_resnet_blocks(&model, &te, &quick_cfg()).unwrap();
    let worst = results
        .iter()
        .min_by(|a, b| a.delta_r.total_cmp(&b.delta_r))
        .unwrap();
    assert_eq!(worst.name, "resnet_block:3");
    let single = ablate_resnet_block(&model, &te, 3, &quick_cfg()).unwrap();
    assert_eq!(&single.delta_r, &results[2].delta_r);
    assert!(matches!(
        ablate_resnet_block(&model, &te, 0, &quick_cfg()),
        Err(AnalysisError::BadUnit(_))
    ));
    assert!(matches!(
        ablate_resnet_block(&model, &te, 5, &quick_cfg()),
        Err(AnalysisError::BadUnit(_))
    ));
}

#[test]
fn zeroing_is_idempotent() {
    let (model, te) = fit(&compact_spec(Target::Both, 25));
    let range = te.layout.block_range(1);
    let zeroed: Vec<FeatureRecord> = te
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.resnet[range.clone()].iter_mut().for_each(|v| *v = 0.0);
            r.dino[5] = 0.0;
            r
        })
        .collect();
    let twice = model
        .predict_records(&zeroed, Ablation::ResnetBlock(1))
        .unwrap();
    let plain = model.predict_records(&zeroed, Ablation::None).unwrap();
    let dim = model
        .predict_records(&zeroed, Ablation::DinoDim(5))
        .unwrap();
    assert_eq!(twice, plain);
    assert_eq!(dim, plain);
    assert_ne!(
        plain,
        model.predict_records(&te.records, Ablation::None).unwrap()
    );
}

#[test]
fn dimensions_that_are_always_zero_have_no_effect() {
    let spec = SyntheticSpec {
        zero_dino_dims: vec![3, 30],
        ..compact_spec(Target::DinoOnly, 26)
    };
    let (model, te) = fit(&spec);
    let results = ablate_dino_dims(&model, &te, &quick_cfg()).unwrap();
    for j in [3, 30] {
        assert_eq!(results[j].delta_r, 0.0);
        assert_eq!(results[j].delta_rho, 0.0);
        assert_eq!(results[j].p_value, 1.0);
        assert!(!results[j].fdr_significant);
    }
    let profile = grad_importance(&model, &te, &quick_cfg()).unwrap();
    assert_eq!(profile.importance[3], 0.0);
    assert_eq!(profile.importance[30], 0.0);
    assert!(profile.importance.iter().filter(|&&v| v > 0.0).count() == 46);
}

/// Prediction `sum_j a_j x_j`, whose input gradient is `a` everywhere.
struct LinearMap(Vec<f64>);

impl DinoSaliency for LinearMap {
    fn dino_dim(&self) -> usize {
        self.0.len()
    }

    fn dino_gradients(&self, records: &[FeatureRecord]) -> Result<Vec<Vec<f64>>, AnalysisError> {
        Ok(records.iter().map(|_| self.0.clone()).collect())
    }
}

#[test]
fn importance_of_a_linear_map_is_mean_absolute_contribution() {
    let (_, te) = generate(&compact_spec(Target::Both, 27));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
    let profile = grad_importance(&LinearMap(a.clone()), &te, &quick_cfg()).unwrap();
    for j in 0..48 {
        let want = te
            .records
            .iter()
            .map(|r| (a[j] * f64::from(r.dino[j])).abs())
            .sum::<f64>()
            / te.len() as f64;
        assert!((profile.importance[j] - want).abs() < 1e-10);
    }
}

#[test]
fn model_input_gradients_match_finite_differences() {
    let (tr, te) = generate(&compact_spec(Target::Both, 28));
    let (trained, _) = train::<f64>(
        &compact_model(&tr.layout, 0),
        &quick_train(0),
        &tr,
        None,
        &mut |_| {},
    )
    .unwrap();
    let model: Model64 = trained.eval_model();
    let records = &te.records[..4];
    let grads = model.dino_gradients(records).unwrap();
    let h = 1e-5;
    for (rec, g) in records.iter().zip(&grads) {
        let d: Vec<f64> = rec.dino.iter().map(|&v| v.into()).collect();
        let r: Vec<f64> = rec.resnet.iter().map(|&v| v.into()).collect();
        for j in 0..d.len() {
            let mut up = d.clone();
            up[j] += h;
            let mut down = d.clone();
            down[j] -= h;
            let numeric = (score(&model, &up, &r) - score(&model, &down, &r)) / (2.0 * h);
            let err = (g[j] - numeric).abs();
            assert!(
                err < 1e-9 || err / g[j].abs().max(numeric.abs()) < 1e-4,
                "dim {j}: {} vs {numeric}",
                g[j]
            );
        }
    }
}

fn score(model: &Model64, dino: &[f64], resnet: &[f64]) -> f64 {
    let d = Matrix::row_vector(dino);
    let r = Matrix::row_vector(resnet);
    model.predict_matrices(&d, Resnet::Raw(&r), None).unwrap()[0].score
}

#[test]
fn attention_tracks_score_when_dino_carries_it() {
    let (model, te) = fit(&compact_spec(Target::DinoOnly, 29));
    let corr = attention_weight_correlation(&model, &te).unwrap();
    assert!(corr > 0.0, "{corr}");
}

#[test]
fn flat_attention_has_no_correlation() {
    let (_, te) = generate(&compact_spec(Target::Both, 30));
    let mut model = Model::init(&compact_model(&te.layout, 0)).unwrap();
    let id = model.params().id("fusion.log_tau").unwrap();
    model.params_mut().value_mut(id)[0] = 60.0;
    assert!(matches!(
        attention_weight_correlation(&model, &te),
        Err(AnalysisError::Metric(MetricError::ZeroVariance(_)))
    ));
}

fn exchangeable(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let noisy = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        t.iter()
            .map(|&v| v + 1.5 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let a = noisy(rng);
    let b = noisy(rng);
    (a, b, t)
}

#[test]
fn permutation_test_is_calibrated_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let trials = 200;
    let rejections = (0..trials)
        .filter(|&i| {
            let (a, b, t) = exchangeable(&mut rng, 100);
            permutation_test_delta(&a, &b, &t, 999, i).unwrap().p_value < 0.05
        })
        .count();
    let rate = rejections as f64 / trials as f64;
    assert!((0.02..=0.08).contains(&rate), "rejection rate {rate}");
}

#[test]
fn fdr_flags_nothing_under_a_global_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let p: Vec<f64> = (0..48)
        .map(|i| {
            let (a, b, t) = exchangeable(&mut rng, 200);
            permutation_test_delta(&a, &b, &t, 2000, i).unwrap().p_value
        })
        .collect();
    assert!(bh_fdr(&p, 0.01).unwrap().iter().all(|&k| !k));
}
