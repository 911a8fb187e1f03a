//! Training over precomputed features, and evaluation.

use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::features::{DatasetManifest, FeatureError};
use crate::matrix::Matrix;
use crate::metrics::{MetricError, MetricReport};
use crate::model::{Ablation, BranchInput, DrexModel, FusionConfig, ModelError, Prediction};
use crate::nn::{AdamW, AdamWConfig, EmaInit, EmaState, NnError, OneCycleSchedule, Tape};
use crate::scalar::Scalar;

/// Random streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub ema_decay: f64,
    pub ema_init: EmaInit,
    pub huber_delta: f64,
    /// Seeds shuffling and dropout; initialization uses the model seed.
    pub seed: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub adamw: AdamWConfig,
    /// Evaluate with the averaged weights rather than the raw ones.
    pub eval_with_ema: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = OneCycleSchedule::new(1e-3, 1);
        Self {
            epochs: 10,
            batch_size: 16,
            max_lr: 1e-3,
            ema_decay: 0.999,
            ema_init: EmaInit::default(),
            huber_delta: 1.0,
            seed: 0,
            pct_start: s.pct_start,
            div_factor: s.div_factor,
            final_div_factor: s.final_div_factor,
            adamw: AdamWConfig::default(),
            eval_with_ema: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        if !(0.0..=1.0).contains(&self.pct_start)
            || !(self.div_factor > 0.0)
            || !(self.final_div_factor > 0.0)
        {
            return bad("invalid one-cycle constants");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n: usize) -> OneCycleSchedule {
        OneCycleSchedule {
            max_lr: self.max_lr,
            total_steps: self.epochs * self.steps_per_epoch(n),
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("{split} set: record `{id}` has no score")]
    MissingScore { split: &'static str, id: String },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (step {step})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        step: usize,
        loss: f64,
    },
    #[error("parameters became non-finite after step {step}")]
    NonFiniteParams { step: usize },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Emitted after every optimizer step.
pub struct StepEvent<'a, T> {
    pub epoch: usize,
    pub batch: usize,
    /// 0-based index of the step just taken.
    pub step: usize,
    /// Learning rate used for this step.
    pub lr: f64,
    pub loss: f64,
    pub model: &'a DrexModel<T>,
    pub ema: &'a EmaState<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_records: usize,
    pub total_steps: usize,
    pub param_count: usize,
    pub epoch_loss: Vec<f64>,
    pub validation: Option<MetricReport>,
    /// Wall-clock seconds per epoch; excluded from [`TrainReport::render`].
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    /// Reproducible text form.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train_records: {}", self.train_records);
        let _ = writeln!(s, "total_steps: {}", self.total_steps);
        let _ = writeln!(s, "param_count: {}", self.param_count);
        for (i, l) in self.epoch_loss.iter().enumerate() {
            let _ = writeln!(s, "epoch {}: mean_loss={l:.8e}", i + 1);
        }
        match &self.validation {
            Some(m) => {
                let _ = writeln!(s, "validation: {m}");
            }
            None => s.push_str("validation: none\n"),
        }
        s
    }

    pub fn render_timing(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.epoch_seconds.iter().enumerate() {
            let _ = writeln!(s, "epoch {}: {t:.3}s", i + 1);
        }
        s
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Final state of a run.
pub struct Trained<T> {
    pub model: DrexModel<T>,
    pub ema: EmaState<T>,
    pub config: TrainConfig,
    pub steps: u64,
}

impl<T: Scalar> Trained<T> {
    /// Model with the weights used for evaluation under the run's config.
    pub fn eval_model(&self) -> DrexModel<T> {
        if self.config.eval_with_ema {
            self.ema_model()
        } else {
            self.model.clone()
        }
    }

    pub fn ema_model(&self) -> DrexModel<T> {
        let params = self.ema.apply_to(self.model.params());
        DrexModel::from_params(self.model.config(), params).expect("layout unchanged")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.model.config().clone(),
            self.config.clone(),
            self.model.params(),
            Some(&self.ema),
            self.steps,
        )
    }
}

fn scored(set: &DatasetManifest, split: &'static str) -> Result<Vec<f64>, TrainError> {
    if set.is_empty() {
        return Err(TrainError::Empty(split));
    }
    set.scores()
        .map_err(|id| TrainError::MissingScore { split, id })
}

fn gather<T: Scalar>(all: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    let mut data = Vec::with_capacity(rows.len() * all.cols());
    for &r in rows {
        data.extend_from_slice(all.row(r));
    }
    Matrix::from_vec(rows.len(), all.cols(), data)
}

/// Trains from a fresh initialization. `observer` sees every step.
pub fn train<T: Scalar>(
    model_config: &FusionConfig,
    config: &TrainConfig,
    train_set: &DatasetManifest,
    val_set: Option<&DatasetManifest>,
    observer: &mut dyn FnMut(&StepEvent<'_, T>),
) -> Result<(Trained<T>, TrainReport), TrainError> {
    config.validate()?;
    let targets = scored(train_set, "training")?;
    train_set.ensure_layout(&model_config.layout())?;
    if let Some(v) = val_set {
        scored(v, "validation")?;
        v.ensure_layout(&model_config.layout())?;
    }

    let mut model = DrexModel::<T>::init(model_config)?;
    let (dino_all, resnet_all) = model.input_matrices(&train_set.records, Ablation::None)?;
    let targets: Vec<T> = targets.iter().map(|&t| T::lit(t)).collect();
    let n = targets.len();
    let schedule = config.schedule(n);
    let mut optimizer = AdamW::new(model.params(), config.adamw);
    let mut ema = EmaState::with_init(model.params(), T::lit(config.ema_decay), config.ema_init);
    let delta = T::lit(config.huber_delta);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let batch_targets: Vec<T> = rows.iter().map(|&r| targets[r]).collect();
            let mut tape = Tape::new();
            let d = tape.constant(gather(&dino_all, rows));
            let r = tape.constant(gather(&resnet_all, rows));
            let out = model.forward(
                &mut tape,
                BranchInput::Raw(d),
                BranchInput::Raw(r),
                None,
                Some(&mut dropout_rng),
            )?;
            let loss_var = tape.huber(out.prediction, &batch_targets, delta)?;
            let loss = tape.value(loss_var).get(0, 0).as_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch,
                    step,
                    loss,
                });
            }
            let params = model.params_mut();
            params.zero_grad();
            tape.backward(loss_var, params)?;
            let lr = schedule.lr(step)?;
            optimizer.step(params, T::lit(lr));
            if !params.all_finite() {
                return Err(TrainError::NonFiniteParams { step });
            }
            ema.update(model.params())?;
            loss_sum += loss * rows.len() as f64;
            observer(&StepEvent {
                epoch,
                batch,
                step,
                lr,
                loss,
                model: &model,
                ema: &ema,
            });
            step += 1;
        }
        epoch_loss.push(loss_sum / n as f64);
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    let trained = Trained {
        model,
        ema,
        config: config.clone(),
        steps: step as u64,
    };
    let validation = match val_set {
        Some(v) => Some(evaluate(&trained.eval_model(), v)?.0),
        None => None,
    };
    let report = TrainReport {
        train_records: n,
        total_steps: step,
        param_count: trained.model.param_count(),
        epoch_loss,
        validation,
        epoch_seconds,
    };
    Ok((trained, report))
}

/// Metrics of `model` on a scored set, with the per-record predictions.
pub fn evaluate<T: Scalar>(
    model: &DrexModel<T>,
    set: &DatasetManifest,
) -> Result<(MetricReport, Vec<Prediction<T>>), TrainError> {
    let targets = scored(set, "evaluation")?;
    let preds = model.predict_records(&set.records, Ablation::None)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score.as_f64()).collect();
    Ok((MetricReport::compute(&targets, &scores)?, preds))
}
