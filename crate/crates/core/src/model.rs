//! The fusion model: per-branch projection (affine, LayerNorm, GELU), an
//! attention MLP producing two softmax weights at a learnable temperature,
//! a weighted sum with a learnable residual scale, a final LayerNorm and an
//! MLP regression head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureLayout, FeatureRecord, DEFAULT_BLOCK_DIMS, DEFAULT_DINO_DIM};
use crate::matrix::Matrix;
use crate::nn::{NnError, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// Rows per inference tape.
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected length {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid ablation: {0}")]
    BadAblation(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub dino_dim: usize,
    pub block_dims: Vec<usize>,
    /// Width of both projected embeddings and of the head input.
    pub proj_dim: usize,
    pub attn_hidden: usize,
    /// Hidden widths of the head; a final layer maps to one output.
    pub head_dims: Vec<usize>,
    pub dropout_p: f64,
    pub tau_init: f64,
    pub alpha_init: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dino_dim: DEFAULT_DINO_DIM,
            block_dims: DEFAULT_BLOCK_DIMS.to_vec(),
            proj_dim: 384,
            attn_hidden: 128,
            head_dims: vec![128, 64, 32],
            dropout_p: 0.1,
            tau_init: 1.0,
            alpha_init: 0.1,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            dino_dim: self.dino_dim,
            block_dims: self.block_dims.clone(),
        }
    }

    pub fn resnet_dim(&self) -> usize {
        self.block_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.dino_dim == 0 || self.proj_dim == 0 || self.attn_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.block_dims.is_empty() || self.block_dims.contains(&0) {
            return bad("block dims must be non-empty and positive");
        }
        if self.head_dims.contains(&0) {
            return bad("head widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad("tau_init must be positive");
        }
        if !(self.layer_norm_eps >= 0.0) || !self.alpha_init.is_finite() {
            return bad("layer_norm_eps must be non-negative and alpha_init finite");
        }
        Ok(())
    }
}

/// Which projected embedding to replace by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Dino,
    Resnet,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Dino => "dino",
            Branch::Resnet => "resnet",
        })
    }
}

impl FromStr for Branch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dino" => Ok(Branch::Dino),
            "resnet" => Ok(Branch::Resnet),
            other => Err(ModelError::BadAblation(format!("unknown branch `{other}`"))),
        }
    }
}

/// Inference-time feature removal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Zero a whole projected embedding; attention is recomputed from the zeros.
    Branch(Branch),
    /// Zero one raw DINO dimension before projection.
    DinoDim(usize),
    /// Zero one residual block (0-based) of the raw ResNet vector before projection.
    ResnetBlock(usize),
}

/// Either raw branch features or the precomputed output of that branch's
/// affine projection.
#[derive(Clone, Copy, Debug)]
pub enum BranchInput {
    Raw(Var),
    Affine(Var),
}

/// Handles to the named intermediates of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub dino_embed: Var,
    pub resnet_embed: Var,
    /// `[w_d, w_r]` per row.
    pub weights: Var,
    /// Weighted sum before the final LayerNorm.
    pub mixed: Var,
    pub fused: Var,
    /// `rows x 1`.
    pub prediction: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T> {
    pub score: T,
    pub w_d: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<T> {
    pub fused: Vec<T>,
    pub mixed: Vec<T>,
    pub w_d: T,
    pub w_r: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    offset: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    dino_proj: Affine,
    dino_norm: Norm,
    resnet_proj: Affine,
    resnet_norm: Norm,
    attn_hidden: Affine,
    attn_logits: Affine,
    log_tau: ParamId,
    alpha: ParamId,
    fused_norm: Norm,
    head: Vec<Affine>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrexModel<T> {
    config: FusionConfig,
    params: ParamStore<T>,
    layers: Layers,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Affine {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(self.rng.random_range(-bound..bound)))
                .collect()
        };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Affine {
            weight: self
                .store
                .add(format!("{name}.weight"), vec![fan_in, fan_out], w),
            bias: self.store.add(format!("{name}.bias"), vec![fan_out], b),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self
                .store
                .add(format!("{name}.gain"), vec![dim], vec![T::one(); dim]),
            offset: self
                .store
                .add(format!("{name}.offset"), vec![dim], vec![T::zero(); dim]),
        }
    }

    fn scalar(&mut self, name: &str, v: f64) -> ParamId {
        self.store.add(name, vec![1], vec![T::lit(v)])
    }
}

impl<T: Scalar> DrexModel<T> {
    /// Deterministic initialization from `config.seed`: affine weights and
    /// biases uniform in `±sqrt(1 / fan_in)`, norm gains 1, offsets 0.
    pub fn init(config: &FusionConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let c = config;
        let dino_proj = b.affine("dino_proj", c.dino_dim, c.proj_dim);
        let dino_norm = b.norm("dino_norm", c.proj_dim);
        let resnet_proj = b.affine("resnet_proj", c.resnet_dim(), c.proj_dim);
        let resnet_norm = b.norm("resnet_norm", c.proj_dim);
        let attn_hidden = b.affine("attention.hidden", 2 * c.proj_dim, c.attn_hidden);
        let attn_logits = b.affine("attention.logits", c.attn_hidden, 2);
        let log_tau = b.scalar("fusion.log_tau", c.tau_init.ln());
        let alpha = b.scalar("fusion.alpha", c.alpha_init);
        let fused_norm = b.norm("fused_norm", c.proj_dim);
        let mut head = Vec::new();
        let mut fan_in = c.proj_dim;
        for (i, &w) in c.head_dims.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(b.affine(&format!("head.{i}"), fan_in, w));
            fan_in = w;
        }
        let layers = Layers {
            dino_proj,
            dino_norm,
            resnet_proj,
            resnet_norm,
            attn_hidden,
            attn_logits,
            log_tau,
            alpha,
            fused_norm,
            head,
        };
        Ok(Self {
            config: config.clone(),
            params: b.store,
            layers,
        })
    }

    /// Model with the architecture of `config` and the given parameter store,
    /// which must match the initialized layout by name and shape.
    pub fn from_params(config: &FusionConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        let template = Self::init(config)?;
        if template.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter arrays, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, a), (_, b)) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(ModelError::Config(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            layers: template.layers,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn temperature(&self) -> T {
        self.params.value(self.layers.log_tau)[0].exp()
    }

    pub fn residual_scale(&self) -> T {
        self.params.value(self.layers.alpha)[0]
    }

    fn branch(
        &self,
        tape: &mut Tape<T>,
        input: BranchInput,
        proj: Affine,
        norm: Norm,
    ) -> Result<Var, NnError> {
        let p = &self.params;
        let lin = match input {
            BranchInput::Raw(x) => tape.affine(p, x, proj.weight, proj.bias)?,
            BranchInput::Affine(v) => v,
        };
        let normed = tape.layer_norm(
            p,
            lin,
            norm.gain,
            norm.offset,
            T::lit(self.config.layer_norm_eps),
        )?;
        tape.gelu(normed)
    }

    /// Affine output of the ResNet projection, reusable through
    /// [`BranchInput::Affine`].
    pub fn resnet_affine(&self, tape: &mut Tape<T>, resnet: Var) -> Result<Var, NnError> {
        let a = self.layers.resnet_proj;
        tape.affine(&self.params, resnet, a.weight, a.bias)
    }

    /// Records a batched forward pass. `dropout` carries the generator in
    /// training mode; `None` means inference.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        dino: BranchInput,
        resnet: BranchInput,
        zeroed: Option<Branch>,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<ForwardVars, ModelError> {
        let l = &self.layers;
        let p = &self.params;
        let rows = match dino {
            BranchInput::Raw(v) | BranchInput::Affine(v) => tape.value(v).rows(),
        };
        let zeros = |tape: &mut Tape<T>| tape.constant(Matrix::zeros(rows, self.config.proj_dim));

        let d = match zeroed {
            Some(Branch::Dino) => zeros(tape),
            _ => self.branch(tape, dino, l.dino_proj, l.dino_norm)?,
        };
        let r = match zeroed {
            Some(Branch::Resnet) => zeros(tape),
            _ => self.branch(tape, resnet, l.resnet_proj, l.resnet_norm)?,
        };

        let joint = tape.concat(d, r)?;
        let hidden = tape.affine(p, joint, l.attn_hidden.weight, l.attn_hidden.bias)?;
        let hidden = tape.gelu(hidden)?;
        let logits = tape.affine(p, hidden, l.attn_logits.weight, l.attn_logits.bias)?;
        let weights = tape.softmax_temperature(p, logits, l.log_tau)?;

        let wd_d = tape.scale_by_column(d, weights, 0)?;
        let wr_r = tape.scale_by_column(r, weights, 1)?;
        let attended = tape.add(wd_d, wr_r)?;
        let both = tape.add(d, r)?;
        let residual = tape.scale_by_param(p, both, l.alpha)?;
        let mixed = tape.add(attended, residual)?;
        let eps = T::lit(self.config.layer_norm_eps);
        let fused = tape.layer_norm(p, mixed, l.fused_norm.gain, l.fused_norm.offset, eps)?;

        let (last, hidden_layers) = l.head.split_last().expect("head has an output layer");
        let mut x = fused;
        for layer in hidden_layers {
            x = tape.affine(p, x, layer.weight, layer.bias)?;
            x = tape.gelu(x)?;
            if let Some(rng) = dropout.as_deref_mut() {
                x = tape.dropout(x, self.config.dropout_p, rng)?;
            }
        }
        let prediction = tape.affine(p, x, last.weight, last.bias)?;
        Ok(ForwardVars {
            dino_embed: d,
            resnet_embed: r,
            weights,
            mixed,
            fused,
            prediction,
        })
    }

    fn check_dims(&self, dino: usize, resnet: usize) -> Result<(), ModelError> {
        if dino != self.config.dino_dim {
            return Err(ModelError::DimMismatch {
                what: "dino features",
                expected: self.config.dino_dim,
                got: dino,
            });
        }
        if resnet != self.config.resnet_dim() {
            return Err(ModelError::DimMismatch {
                what: "resnet features",
                expected: self.config.resnet_dim(),
                got: resnet,
            });
        }
        Ok(())
    }

    /// Fusion stage for one image.
    pub fn fuse(
        &self,
        dino: &[T],
        resnet: &[T],
        training: Option<&mut dyn RngCore>,
    ) -> Result<Fusion<T>, ModelError> {
        self.check_dims(dino.len(), resnet.len())?;
        let mut tape = Tape::inputs_only();
        let d = tape.constant(Matrix::row_vector(dino));
        let r = tape.constant(Matrix::row_vector(resnet));
        let out = self.forward(
            &mut tape,
            BranchInput::Raw(d),
            BranchInput::Raw(r),
            None,
            training,
        )?;
        let w = tape.value(out.weights);
        Ok(Fusion {
            fused: tape.value(out.fused).row(0).to_vec(),
            mixed: tape.value(out.mixed).row(0).to_vec(),
            w_d: w.get(0, 0),
            w_r: w.get(0, 1),
        })
    }

    /// Predicted complexity and DINO attention weight for one record.
    pub fn predict(
        &self,
        record: &FeatureRecord,
        training: Option<&mut dyn RngCore>,
    ) -> Result<Prediction<T>, ModelError> {
        self.check_dims(record.dino.len(), record.resnet.len())?;
        let mut tape = Tape::inputs_only();
        let d = tape.constant(Matrix::row_vector(&to_scalars(&record.dino)));
        let r = tape.constant(Matrix::row_vector(&to_scalars(&record.resnet)));
        let out = self.forward(
            &mut tape,
            BranchInput::Raw(d),
            BranchInput::Raw(r),
            None,
            training,
        )?;
        Ok(Prediction {
            score: tape.value(out.prediction).get(0, 0),
            w_d: tape.value(out.weights).get(0, 0),
        })
    }

    /// Stacks records into `(dino, resnet)` matrices with `ablation`'s raw
    /// zeroing applied.
    pub fn input_matrices(
        &self,
        records: &[FeatureRecord],
        ablation: Ablation,
    ) -> Result<(Matrix<T>, Matrix<T>), ModelError> {
        self.check_ablation(ablation)?;
        let mut dino = Matrix::zeros(records.len(), self.config.dino_dim);
        let mut resnet = Matrix::zeros(records.len(), self.config.resnet_dim());
        for (i, rec) in records.iter().enumerate() {
            self.check_dims(rec.dino.len(), rec.resnet.len())?;
            for (dst, &src) in dino.row_mut(i).iter_mut().zip(&rec.dino) {
                *dst = T::of_f32(src);
            }
            for (dst, &src) in resnet.row_mut(i).iter_mut().zip(&rec.resnet) {
                *dst = T::of_f32(src);
            }
        }
        match ablation {
            Ablation::DinoDim(j) => dino.zero_columns(j, j + 1),
            Ablation::ResnetBlock(b) => {
                let range = self.config.layout().block_range(b);
                resnet.zero_columns(range.start, range.end);
            }
            Ablation::None | Ablation::Branch(_) => {}
        }
        Ok((dino, resnet))
    }

    fn check_ablation(&self, ablation: Ablation) -> Result<(), ModelError> {
        match ablation {
            Ablation::DinoDim(j) if j >= self.config.dino_dim => {
                Err(ModelError::BadAblation(format!(
                    "dino dimension {j} out of range 0..{}",
                    self.config.dino_dim
                )))
            }
            Ablation::ResnetBlock(b) if b >= self.config.block_dims.len() => {
                Err(ModelError::BadAblation(format!(
                    "resnet block index {b} out of range 0..{}",
                    self.config.block_dims.len()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Inference over many records.
    pub fn predict_records(
        &self,
        records: &[FeatureRecord],
        ablation: Ablation,
    ) -> Result<Vec<Prediction<T>>, ModelError> {
        let (dino, resnet) = self.input_matrices(records, ablation)?;
        let zeroed = match ablation {
            Ablation::Branch(b) => Some(b),
            _ => None,
        };
        self.predict_matrices(&dino, Resnet::Raw(&resnet), zeroed)
    }

    /// Affine ResNet projection of every row, for reuse across many
    /// DINO-side ablations.
    pub fn resnet_affine_rows(&self, resnet: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        let chunks: Vec<Matrix<T>> = row_chunks(resnet)
            .into_par_iter()
            .map(|chunk| {
                let mut tape = Tape::inputs_only();
                let x = tape.constant(chunk);
                let v = self.resnet_affine(&mut tape, x)?;
                Ok(tape.value(v).clone())
            })
            .collect::<Result<_, NnError>>()?;
        Ok(stack(&chunks, self.config.proj_dim))
    }

    pub fn predict_matrices(
        &self,
        dino: &Matrix<T>,
        resnet: Resnet<'_, T>,
        zeroed: Option<Branch>,
    ) -> Result<Vec<Prediction<T>>, ModelError> {
        let (resnet_m, is_affine) = match resnet {
            Resnet::Raw(m) => (m, false),
            Resnet::Affine(m) => (m, true),
        };
        if !is_affine {
            self.check_dims(dino.cols(), resnet_m.cols())?;
        }
        let pairs: Vec<(Matrix<T>, Matrix<T>)> = row_chunks(dino)
            .into_iter()
            .zip(row_chunks(resnet_m))
            .collect();
        let parts: Vec<Vec<Prediction<T>>> = pairs
            .into_par_iter()
            .map(|(d, r)| {
                let mut tape = Tape::inputs_only();
                let dv = tape.constant(d);
                let rv = tape.constant(r);
                let rin = if is_affine {
                    BranchInput::Affine(rv)
                } else {
                    BranchInput::Raw(rv)
                };
                let out = self.forward(&mut tape, BranchInput::Raw(dv), rin, zeroed, None)?;
                let pred = tape.value(out.prediction);
                let w = tape.value(out.weights);
                Ok((0..pred.rows())
                    .map(|i| Prediction {
                        score: pred.get(i, 0),
                        w_d: w.get(i, 0),
                    })
                    .collect())
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Predictions and `d prediction / d dino` for every row.
    pub fn dino_input_gradients(
        &self,
        dino: &Matrix<T>,
        resnet: &Matrix<T>,
    ) -> Result<(Vec<T>, Matrix<T>), ModelError> {
        self.check_dims(dino.cols(), resnet.cols())?;
        let pairs: Vec<(Matrix<T>, Matrix<T>)> = row_chunks(dino)
            .into_iter()
            .zip(row_chunks(resnet))
            .collect();
        let parts: Vec<(Vec<T>, Matrix<T>)> = pairs
            .into_par_iter()
            .map(|(d, r)| {
                let mut tape = Tape::inputs_only();
                let dv = tape.input(d);
                let rv = tape.constant(r);
                let out = self.forward(
                    &mut tape,
                    BranchInput::Raw(dv),
                    BranchInput::Raw(rv),
                    None,
                    None,
                )?;
                let total = tape.sum(out.prediction)?;
                let grads = tape.backward_inputs(total, &self.params)?;
                let g = grads
                    .wrt(dv)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(tape.value(dv).rows(), dino.cols()));
                Ok((tape.value(out.prediction).column(0), g))
            })
            .collect::<Result<_, ModelError>>()?;
        let preds = parts.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        let grads: Vec<Matrix<T>> = parts.into_iter().map(|(_, g)| g).collect();
        Ok((preds, stack(&grads, dino.cols())))
    }
}

/// ResNet-side input to [`DrexModel::predict_matrices`].
#[derive(Clone, Copy, Debug)]
pub enum Resnet<'a, T> {
    Raw(&'a Matrix<T>),
    Affine(&'a Matrix<T>),
}

pub fn to_scalars<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of_f32(x)).collect()
}

fn row_chunks<T: Scalar>(m: &Matrix<T>) -> Vec<Matrix<T>> {
    (0..m.rows())
        .step_by(INFERENCE_CHUNK)
        .map(|start| {
            let end = (start + INFERENCE_CHUNK).min(m.rows());
            Matrix::from_vec(
                end - start,
                m.cols(),
                m.as_slice()[start * m.cols()..end * m.cols()].to_vec(),
            )
        })
        .collect()
}

fn stack<T: Scalar>(parts: &[Matrix<T>], cols: usize) -> Matrix<T> {
    let rows = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}
