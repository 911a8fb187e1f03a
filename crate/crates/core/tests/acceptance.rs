//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    naive_pearson, naive_rmse_mae, naive_spearman, perturb_all, random_records, ridge_oracle,
    Reference,
};
use drex::analysis::{ablate_dino_dim, bh_fdr, permutation_test_delta, AnalysisConfig};
use drex::metrics::MetricReport;
use drex::nn::{EmaState, ParamStore};
use drex::synthetic::{generate, SyntheticSpec};
use drex::trainer::{train, TrainConfig};
use drex::{Ablation, Branch, FusionConfig, Model, Model64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let err = common::max_gradient_error(10, 2024);
    let took = started.elapsed();
    check(
        err < 1e-4 && took < Duration::from_secs(60),
        format!(
            "10 random configs, max relative error {err:.2e} (< 1e-4), {:.1}s (< 60s)",
            took.as_secs_f64()
        ),
    )
}

fn parameter_count() -> Outcome {
    let n = Model::init(&FusionConfig::default())
        .map_err(|e| e.to_string())?
        .param_count();
    check(
        n == 1_783_429 && (1_700_000..=1_900_000).contains(&n),
        format!("{n} trainable parameters (expected 1783429, bounds [1.70M, 1.90M])"),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        // coarse grids force ties in both vectors
        let c: Vec<f64> = (0..50)
            .map(|_| f64::from(rng.random_range(0..12u8)) / 11.0)
            .collect();
        let p: Vec<f64> = (0..50)
            .map(|_| f64::from(rng.random_range(0..20u8)) * 0.05 + 0.1)
            .collect();
        let m = MetricReport::compute(&c, &p).map_err(|e| e.to_string())?;
        let (rmse, mae) = naive_rmse_mae(&c, &p);
        for diff in [
            m.pearson_r - naive_pearson(&c, &p),
            m.spearman_rho - naive_spearman(&c, &p),
            m.rmse - rmse,
            m.mae - mae,
        ] {
            worst = worst.max(diff.abs());
        }
    }
    check(
        worst < 1e-10,
        format!("100 tied pairs of n=50, max deviation {worst:.1e} (< 1e-10)"),
    )
}

fn learnability() -> Outcome {
    let spec = SyntheticSpec {
        seed: 17,
        ..SyntheticSpec::default()
    };
    let (tr, te) = generate(&spec);
    let started = Instant::now();
    let mcfg = FusionConfig::default();
    let (_, report) = train::<f32>(&mcfg, &TrainConfig::default(), &tr, Some(&te), &mut |_| {})
        .map_err(|e| e.to_string())?;
    let took = started.elapsed();
    let r = report.validation.expect("validation set given").pearson_r;
    let targets = common::targets(&te);
    let ridge = naive_pearson(
        &targets,
        &ridge_oracle(
            &tr,
            &te,
            tr.layout.dino_dim as f64 + tr.layout.resnet_dim() as f64,
        ),
    );
    check(
        r >= 0.95 && ridge >= 0.95 && took < Duration::from_secs(120),
        format!(
            "2000/500 synthetic, 10 epochs: held-out r {r:.4} (>= 0.95), ridge oracle r {ridge:.4} (>= 0.95), training {:.1}s (< 120s)",
            took.as_secs_f64()
        ),
    )
}

fn ablation_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = FusionConfig {
        seed: 8,
        ..FusionConfig::default()
    };
    let mut model = Model64::init(&cfg).map_err(|e| e.to_string())?;
    perturb_all(&mut model, &mut rng);
    let reference = Reference { model: &model };
    let records = random_records(&mut rng, &cfg, 100);
    let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
    let mut mismatches = 0;
    for (branch, zero_dino) in [(Branch::Dino, true), (Branch::Resnet, false)] {
        let preds = model
            .predict_records(&records, Ablation::Branch(branch))
            .map_err(|e| e.to_string())?;
        for (rec, p) in records.iter().zip(&preds) {
            let want = reference.run(
                &widen(&rec.dino),
                &widen(&rec.resnet),
                zero_dino,
                !zero_dino,
            );
            if p.score.to_bits() != want.score.to_bits() || p.w_d.to_bits() != want.w_d.to_bits() {
                mismatches += 1;
            }
        }
    }

    let zero_dims = vec![0, 99, 383];
    let (_, te) = generate(&SyntheticSpec {
        n_train: 1,
        n_test: 200,
        zero_dino_dims: zero_dims.clone(),
        seed: 9,
        ..SyntheticSpec::default()
    });
    let model = Model::init(&FusionConfig::default()).map_err(|e| e.to_string())?;
    let acfg = AnalysisConfig {
        n_perm: 999,
        ..AnalysisConfig::default()
    };
    let mut deltas = Vec::new();
    for &j in &zero_dims {
        deltas.push(
            ablate_dino_dim(&model, &te, j, &acfg)
                .map_err(|e| e.to_string())?
                .delta_r,
        );
    }
    check(
        mismatches == 0 && deltas.iter().all(|&d| d == 0.0),
        format!("branch ablations vs reference: {mismatches} of 200 differ bitwise; delta_r on all-zero dims {deltas:?}"),
    )
}

fn statistics() -> Outcome {
    let bh = bh_fdr(&[0.001, 0.02, 0.04, 0.9], 0.05).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
    let a: Vec<f64> = t
        .iter()
        .map(|&v| v + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let same = permutation_test_delta(&a, &a, &t, 999, 0)
        .map_err(|e| e.to_string())?
        .p_value;
    let mut rejections = 0;
    for trial in 0..200 {
        let t: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        let mut noisy = || -> Vec<f64> {
            t.iter()
                .map(|&v| v + 1.5 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let (x, y) = (noisy(), noisy());
        if permutation_test_delta(&x, &y, &t, 999, trial)
            .map_err(|e| e.to_string())?
            .p_value
            < 0.05
        {
            rejections += 1;
        }
    }
    let rate = f64::from(rejections) / 200.0;
    check(
        bh == [true, true, false, false] && same == 1.0 && (0.02..=0.08).contains(&rate),
        format!("BH mask {bh:?}; identical sets p={same}; null rejection rate {rate:.3} (within [0.02, 0.08])"),
    )
}

fn traces() -> Outcome {
    let (tr, _) = generate(&SyntheticSpec {
        layout: drex::synthetic::compact_layout(),
        n_train: 300,
        n_test: 1,
        seed: 4,
        ..SyntheticSpec::default()
    });
    let mcfg = common::compact_model(&tr.layout, 0);
    let tcfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let schedule = tcfg.schedule(tr.len());
    let mut lr_mismatch = 0;
    let mut steps = 0;
    train::<f32>(&mcfg, &tcfg, &tr, None, &mut |e| {
        steps += 1;
        if schedule.lr(e.step).ok() != Some(e.lr) {
            lr_mismatch += 1;
        }
    })
    .map_err(|e| e.to_string())?;

    let p = 0.731_f64;
    let mut store = ParamStore::new();
    store.add("p", vec![1], vec![p]);
    let mut ema = EmaState::zeros(&store, 0.999);
    let mut worst = 0.0f64;
    for k in 1..=5000 {
        ema.update(&store).map_err(|e| e.to_string())?;
        let want = p * (1.0 - 0.999f64.powi(k));
        worst = worst.max((ema.shadow()[0][0] - want).abs());
    }
    check(
        lr_mismatch == 0 && steps == 3 * 300usize.div_ceil(16) && worst < 1e-12,
        format!("{steps} logged steps, {lr_mismatch} learning-rate mismatches; zero-init EMA max deviation {worst:.1e} over 5000 steps (< 1e-12)"),
    )
}

fn determinism() -> Outcome {
    let (tr, te) = generate(&SyntheticSpec {
        n_train: 200,
        n_test: 50,
        seed: 3,
        ..SyntheticSpec::default()
    });
    let tcfg = TrainConfig {
        epochs: 2,
        seed: 42,
        ..TrainConfig::default()
    };
    let run = || train::<f32>(&FusionConfig::default(), &tcfg, &tr, Some(&te), &mut |_| {});
    let (a, ra) = run().map_err(|e| e.to_string())?;
    let (b, rb) = run().map_err(|e| e.to_string())?;
    let same_ckpt = a.checkpoint().to_bytes() == b.checkpoint().to_bytes();
    let same_report = ra.render() == rb.render();
    check(
        same_ckpt && same_report,
        format!(
            "two seeded runs: checkpoints identical={same_ckpt}, reports identical={same_report}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradients),
        ("parameter count", parameter_count),
        ("metric oracle equivalence", metric_oracle),
        ("synthetic learnability", learnability),
        ("ablation algebra", ablation_algebra),
        ("statistical machinery", statistics),
        ("schedule and EMA traces", traces),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "NOT RUN  full-dataset reproduction: needs externally extracted IC9600 features; see README for the recipe"
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
