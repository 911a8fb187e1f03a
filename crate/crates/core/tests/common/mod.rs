//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use drex::features::{DatasetManifest, FeatureLayout, FeatureRecord};
use drex::matrix::Matrix;
use drex::model::BranchInput;
use drex::nn::Tape;
use drex::synthetic::{compact_layout, SyntheticSpec, Target};
use drex::trainer::TrainConfig;
use drex::{FusionConfig, Model64};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model sized for fast experiments on the compact layout.
pub fn compact_model(layout: &FeatureLayout, seed: u64) -> FusionConfig {
    FusionConfig {
        dino_dim: layout.dino_dim,
        block_dims: layout.block_dims.clone(),
        proj_dim: 64,
        attn_hidden: 32,
        head_dims: vec![32, 16, 8],
        seed,
        ..FusionConfig::default()
    }
}

pub fn compact_spec(target: Target, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        layout: compact_layout(),
        target,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

pub fn targets(m: &DatasetManifest) -> Vec<f64> {
    m.scores().unwrap()
}

/// Straight-line forward pass of the fusion model in f64, written from the
/// architecture description with plain loops. `zero_dino` / `zero_resnet`
/// replace the corresponding projected embedding by zeros.
pub struct Reference<'a> {
    pub model: &'a Model64,
}

pub struct ReferenceOutput {
    pub score: f64,
    pub w_d: f64,
    pub w_r: f64,
    pub dino_embed: Vec<f64>,
    pub resnet_embed: Vec<f64>,
    /// Weighted sum before the final normalization.
    pub mixed: Vec<f64>,
}

impl Reference<'_> {
    fn p(&self, name: &str) -> &[f64] {
        let id = self
            .model
            .params()
            .id(name)
            .unwrap_or_else(|| panic!("missing {name}"));
        self.model.params().value(id)
    }

    fn linear(&self, layer: &str, x: &[f64]) -> Vec<f64> {
        let w = self.p(&format!("{layer}.weight"));
        let b = self.p(&format!("{layer}.bias"));
        let out = b.len();
        let mut y = b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for k in 0..out {
                y[k] += xi * w[i * out + k];
            }
        }
        y
    }

    fn norm(&self, layer: &str, x: &[f64]) -> Vec<f64> {
        let g = self.p(&format!("{layer}.gain"));
        let o = self.p(&format!("{layer}.offset"));
        let eps = self.model.config().layer_norm_eps;
        let n = x.len() as f64;
        let mut mean = 0.0;
        for &v in x {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for &v in x {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let sd = (var + eps).sqrt();
        x.iter()
            .enumerate()
            .map(|(k, &v)| (v - mean) / sd * g[k] + o[k])
            .collect()
    }

    fn gelu(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| v * (0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))))
            .collect()
    }

    pub fn run(
        &self,
        dino: &[f64],
        resnet: &[f64],
        zero_dino: bool,
        zero_resnet: bool,
    ) -> ReferenceOutput {
        let proj = self.model.config().proj_dim;
        let d = if zero_dino {
            vec![0.0; proj]
        } else {
            Self::gelu(&self.norm("dino_norm", &self.linear("dino_proj", dino)))
        };
        let r = if zero_resnet {
            vec![0.0; proj]
        } else {
            Self::gelu(&self.norm("resnet_norm", &self.linear("resnet_proj", resnet)))
        };
        let joint: Vec<f64> = d.iter().chain(&r).copied().collect();
        let hidden = Self::gelu(&self.linear("attention.hidden", &joint));
        let logits = self.linear("attention.logits", &hidden);
        let tau = self.p("fusion.log_tau")[0].exp();
        let u = [logits[0] / tau, logits[1] / tau];
        let m = u[0].max(u[1]);
        let e = [(u[0] - m).exp(), (u[1] - m).exp()];
        let total = e[0] + e[1];
        let (w_d, w_r) = (e[0] / total, e[1] / total);
        let alpha = self.p("fusion.alpha")[0];
        let mixed: Vec<f64> = (0..proj)
            .map(|k| (w_d * d[k] + w_r * r[k]) + alpha * (d[k] + r[k]))
            .collect();
        let mut x = self.norm("fused_norm", &mixed);
        let layers = self.model.config().head_dims.len();
        for l in 0..layers {
            x = Self::gelu(&self.linear(&format!("head.{l}"), &x));
        }
        let score = self.linear(&format!("head.{layers}"), &x)[0];
        ReferenceOutput {
            score,
            w_d,
            w_r,
            dino_embed: d,
            resnet_embed: r,
            mixed,
        }
    }
}

/// Kernel ridge regression with a linear kernel on centered features.
pub fn ridge_oracle(train: &DatasetManifest, test: &DatasetManifest, lambda: f64) -> Vec<f64> {
    let feats = |m: &DatasetManifest| {
        let r0 = &m.records[0];
        let (dd, d) = (r0.dino.len(), r0.dino.len() + r0.resnet.len());
        DMatrix::from_fn(m.len(), d, |i, j| {
            let r = &m.records[i];
            f64::from(if j < dd { r.dino[j] } else { r.resnet[j - dd] })
        })
    };
    let x = feats(train);
    let xt = feats(test);
    let means: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).mean()).collect();
    let center =
        |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j]);
    let (x, xt) = (center(&x), center(&xt));
    let y = DVector::from_vec(targets(train));
    let y_mean = y.mean();
    let mut gram = &x * x.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let coef = gram
        .cholesky()
        .expect("positive definite")
        .solve(&y.map(|v| v - y_mean));
    (&xt * (x.transpose() * coef))
        .iter()
        .map(|v| v + y_mean)
        .collect()
}

/// Brute-force Pearson correlation straight from the definition.
pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
pub fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    naive_pearson(&naive_ranks(x), &naive_ranks(y))
}

pub fn naive_rmse_mae(c: &[f64], p: &[f64]) -> (f64, f64) {
    let n = c.len() as f64;
    let sq: f64 = c.iter().zip(p).map(|(a, b)| (b - a) * (b - a)).sum();
    let ab: f64 = c.iter().zip(p).map(|(a, b)| (b - a).abs()).sum();
    ((sq / n).sqrt(), ab / n)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
}

pub fn random_records(rng: &mut ChaCha8Rng, cfg: &FusionConfig, n: usize) -> Vec<FeatureRecord> {
    (0..n)
        .map(|i| FeatureRecord {
            id: format!("r{i}"),
            dino: (0..cfg.dino_dim)
                .map(|_| rng.random_range(-3.0f32..3.0))
                .collect(),
            resnet: (0..cfg.resnet_dim())
                .map(|_| rng.random_range(0.0f32..4.0))
                .collect(),
            score: Some(rng.random()),
        })
        .collect()
}

/// Moves every parameter off its initial value, so norm gains and offsets
/// are not all identical.
pub fn perturb_all(model: &mut Model64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params_mut().value_mut(id) {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> FusionConfig {
    let blocks = rng.random_range(1..=3);
    FusionConfig {
        dino_dim: rng.random_range(2..=7),
        block_dims: (0..blocks).map(|_| rng.random_range(1..=4)).collect(),
        proj_dim: rng.random_range(3..=7),
        attn_hidden: rng.random_range(2..=5),
        head_dims: (0..rng.random_range(1..=3))
            .map(|_| rng.random_range(2..=5))
            .collect(),
        tau_init: rng.random_range(0.5..2.0),
        alpha_init: rng.random_range(0.05..0.5),
        seed: rng.random(),
        ..FusionConfig::default()
    }
}

fn batch_loss(model: &Model64, dino: &Matrix<f64>, resnet: &Matrix<f64>, targets: &[f64]) -> f64 {
    let mut tape = Tape::inputs_only();
    let d = tape.constant(dino.clone());
    let r = tape.constant(resnet.clone());
    let out = model
        .forward(
            &mut tape,
            BranchInput::Raw(d),
            BranchInput::Raw(r),
            None,
            None,
        )
        .unwrap();
    let loss = tape.huber(out.prediction, targets, 1.0).unwrap();
    tape.value(loss).get(0, 0)
}

/// Relative error with an absolute floor: differences below 1e-9 count as zero.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs();
    if err < 1e-9 {
        0.0
    } else {
        err / analytic.abs().max(numeric.abs()).max(1e-6)
    }
}

/// Largest relative error between backpropagated and central-difference
/// gradients (step 1e-5) of a Huber loss, over every parameter and input of
/// `trials` random small models.
pub fn max_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let cfg = random_config(&mut rng);
        let mut model = Model64::init(&cfg).unwrap();
        perturb_all(&mut model, &mut rng);
        let rows = 5;
        let dino = random_matrix(&mut rng, rows, cfg.dino_dim);
        let resnet = random_matrix(&mut rng, rows, cfg.resnet_dim());
        let targets: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let d = tape.input(dino.clone());
        let r = tape.input(resnet.clone());
        let out = model
            .forward(
                &mut tape,
                BranchInput::Raw(d),
                BranchInput::Raw(r),
                None,
                None,
            )
            .unwrap();
        let loss = tape.huber(out.prediction, &targets, 1.0).unwrap();
        model.params_mut().zero_grad();
        let input_grads = tape.backward(loss, model.params_mut()).unwrap();

        let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            let analytic = model.params().grad(id).to_vec();
            for (k, &a) in analytic.iter().enumerate() {
                let orig = model.params().value(id)[k];
                model.params_mut().value_mut(id)[k] = orig + h;
                let up = batch_loss(&model, &dino, &resnet, &targets);
                model.params_mut().value_mut(id)[k] = orig - h;
                let down = batch_loss(&model, &dino, &resnet, &targets);
                model.params_mut().value_mut(id)[k] = orig;
                worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
            }
        }

        for (var, is_dino) in [(d, true), (r, false)] {
            let g = input_grads.wrt(var).expect("input gradient");
            let src = if is_dino { &dino } else { &resnet };
            for i in 0..src.rows() {
                for j in 0..src.cols() {
                    let shifted = |delta: f64| {
                        let mut m = src.clone();
                        m.set(i, j, src.get(i, j) + delta);
                        if is_dino {
                            batch_loss(&model, &m, &resnet, &targets)
                        } else {
                            batch_loss(&model, &dino, &m, &targets)
                        }
                    };
                    let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                    worst = worst.max(relative_error(g.get(i, j), numeric));
                }
            }
        }
    }
    worst
}
