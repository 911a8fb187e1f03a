//! Reverse-mode differentiation over batched row-major values.
//!
//! Each recorded op keeps its output and whatever it needs for the adjoint.
//! `backward` walks the record in reverse, accumulating parameter gradients
//! into the [`ParamStore`] and returning adjoints of inputs created with
//! [`Tape::input`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;

use super::ops::{self, gelu_derivative, gelu_scalar, huber_derivative};
use super::params::{ParamId, ParamStore};
use super::NnError;
use crate::matrix::{affine_backward_input, affine_backward_params, affine_forward, Matrix};
use crate::scalar::Scalar;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Affine {
        x: usize,
        weight: ParamId,
        bias: ParamId,
    },
    LayerNorm {
        x: usize,
        gain: ParamId,
        offset: ParamId,
        normed: Matrix<T>,
        std: Vec<T>,
    },
    Gelu {
        x: usize,
    },
    Concat {
        left: usize,
        right: usize,
    },
    SoftmaxTemperature {
        logits: usize,
        log_tau: ParamId,
        tau: T,
    },
    ScaleByColumn {
        x: usize,
        scale: usize,
        col: usize,
    },
    ScaleByParam {
        x: usize,
        scale: ParamId,
    },
    Add {
        a: usize,
        b: usize,
    },
    Dropout {
        x: usize,
        mask: Matrix<T>,
    },
    Hadamard {
        x: usize,
        weight: ParamId,
    },
    Sum {
        x: usize,
    },
    Huber {
        pred: usize,
        target: Vec<T>,
        delta: T,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    param_grads: bool,
    params_version: Option<u64>,
}

/// Adjoints of the inputs recorded with [`Tape::input`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    inputs: HashMap<usize, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` is not a gradient-tracked input of this tape, or the
    /// loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Matrix<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.inputs.get(&var.index)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that accumulates parameter gradients on `backward`.
    pub fn new() -> Self {
        Self::with_param_grads(true)
    }

    /// Tape that only differentiates with respect to inputs.
    pub fn inputs_only() -> Self {
        Self::with_param_grads(false)
    }

    fn with_param_grads(param_grads: bool) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_grads,
            params_version: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    fn idx(&self, var: Var) -> Result<usize, NnError> {
        if var.tape != self.id {
            return Err(NnError::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn touch(&mut self, params: &ParamStore<T>) -> Result<(), NnError> {
        match self.params_version {
            None => {
                self.params_version = Some(params.version());
                Ok(())
            }
            Some(v) if v == params.version() => Ok(()),
            Some(_) => Err(NnError::StaleTape),
        }
    }

    fn grad_of(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A value whose adjoint `backward` reports.
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// `x W + b` with `W` stored `in_dim x out_dim`.
    pub fn affine(
        &mut self,
        params: &ParamStore<T>,
        x: Var,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<Var, NnError> {
        self.touch(params)?;
        let xi = self.idx(x)?;
        let w = params.get(weight);
        let b = params.value(bias);
        let in_dim = self.nodes[xi].value.cols();
        if w.shape != [in_dim, b.len()] {
            return Err(NnError::Shape(format!(
                "affine `{}` has shape {:?}, input has {in_dim} columns",
                w.name, w.shape
            )));
        }
        let y = affine_forward(&self.nodes[xi].value, &w.value, b);
        let rg = self.param_grads || self.grad_of(&[xi]);
        Ok(self.push(
            y,
            Op::Affine {
                x: xi,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn layer_norm(
        &mut self,
        params: &ParamStore<T>,
        x: Var,
        gain: ParamId,
        offset: ParamId,
        eps: T,
    ) -> Result<Var, NnError> {
        self.touch(params)?;
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (g, o) = (params.value(gain), params.value(offset));
        if g.len() != xv.cols() || o.len() != xv.cols() {
            return Err(NnError::Shape(format!(
                "layer norm over {} columns with gain {} / offset {}",
                xv.cols(),
                g.len(),
                o.len()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut normed = Matrix::zeros(xv.rows(), xv.cols());
        let mut stds = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mean, var) = ops::moments(row);
            let std = (var + eps).sqrt();
            for (k, &v) in row.iter().enumerate() {
                let n = (v - mean) / std;
                normed.set(r, k, n);
                out.set(r, k, n * g[k] + o[k]);
            }
            stds.push(std);
        }
        let rg = self.param_grads || self.grad_of(&[xi]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: xi,
                gain,
                offset,
                normed,
                std: stds,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let y = self.nodes[xi].value.map(gelu_scalar);
        let rg = self.grad_of(&[xi]);
        Ok(self.push(y, Op::Gelu { x: xi }, rg))
    }

    /// Column-wise concatenation `[left, right]`.
    pub fn concat(&mut self, left: Var, right: Var) -> Result<Var, NnError> {
        let (li, ri) = (self.idx(left)?, self.idx(right)?);
        let (l, r) = (&self.nodes[li].value, &self.nodes[ri].value);
        if l.rows() != r.rows() {
            return Err(NnError::Shape(format!(
                "concat of {} and {} rows",
                l.rows(),
                r.rows()
            )));
        }
        let mut out = Matrix::zeros(l.rows(), l.cols() + r.cols());
        for b in 0..l.rows() {
            let row = out.row_mut(b);
            row[..l.cols()].copy_from_slice(l.row(b));
            row[l.cols()..].copy_from_slice(r.row(b));
        }
        let rg = self.grad_of(&[li, ri]);
        Ok(self.push(
            out,
            Op::Concat {
                left: li,
                right: ri,
            },
            rg,
        ))
    }

    /// Row-wise `softmax(logits / tau)` with `tau = exp(log_tau)`.
    pub fn softmax_temperature(
        &mut self,
        params: &ParamStore<T>,
        logits: Var,
        log_tau: ParamId,
    ) -> Result<Var, NnError> {
        self.touch(params)?;
        let li = self.idx(logits)?;
        let tau = params.value(log_tau)[0].exp();
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(NnError::Domain(format!(
                "temperature {tau} is not a positive finite value"
            )));
        }
        let lv = &self.nodes[li].value;
        let mut out = Matrix::zeros(lv.rows(), lv.cols());
        for b in 0..lv.rows() {
            out.row_mut(b)
                .copy_from_slice(&ops::softmax_scaled(lv.row(b), tau));
        }
        let rg = self.param_grads || self.grad_of(&[li]);
        Ok(self.push(
            out,
            Op::SoftmaxTemperature {
                logits: li,
                log_tau,
                tau,
            },
            rg,
        ))
    }

    /// `out[b, :] = scale[b, col] * x[b, :]`.
    pub fn scale_by_column(&mut self, x: Var, scale: Var, col: usize) -> Result<Var, NnError> {
        let (xi, si) = (self.idx(x)?, self.idx(scale)?);
        let (xv, sv) = (&self.nodes[xi].value, &self.nodes[si].value);
        if xv.rows() != sv.rows() || col >= sv.cols() {
            return Err(NnError::Shape(
                "scale_by_column: incompatible operands".into(),
            ));
        }
        let mut out = xv.clone();
        for b in 0..xv.rows() {
            let s = sv.get(b, col);
            for v in out.row_mut(b) {
                *v = s * *v;
            }
        }
        let rg = self.grad_of(&[xi, si]);
        Ok(self.push(
            out,
            Op::ScaleByColumn {
                x: xi,
                scale: si,
                col,
            },
            rg,
        ))
    }

    /// `scale * x` for a one-element parameter `scale`.
    pub fn scale_by_param(
        &mut self,
        params: &ParamStore<T>,
        x: Var,
        scale: ParamId,
    ) -> Result<Var, NnError> {
        self.touch(params)?;
        let xi = self.idx(x)?;
        let s = params.value(scale);
        if s.len() != 1 {
            return Err(NnError::Shape(format!(
                "scale parameter has {} elements",
                s.len()
            )));
        }
        let s = s[0];
        let out = self.nodes[xi].value.map(|v| s * v);
        let rg = self.param_grads || self.grad_of(&[xi]);
        Ok(self.push(out, Op::ScaleByParam { x: xi, scale }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(NnError::Shape(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.grad_of(&[ai, bi]);
        Ok(self.push(out, Op::Add { a: ai, b: bi }, rg))
    }

    /// Inverted dropout with a freshly drawn mask.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Domain(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let xi = self.idx(x)?;
        let (rows, cols) = self.nodes[xi].value.shape();
        let mask = Matrix::from_vec(rows, cols, ops::dropout_mask(rows * cols, p, rng));
        let mut out = self.nodes[xi].value.clone();
        for (v, &m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v = *v * m;
        }
        let rg = self.grad_of(&[xi]);
        Ok(self.push(out, Op::Dropout { x: xi, mask }, rg))
    }

    /// `x * w` broadcast over rows.
    pub fn hadamard(
        &mut self,
        params: &ParamStore<T>,
        x: Var,
        weight: ParamId,
    ) -> Result<Var, NnError> {
        self.touch(params)?;
        let xi = self.idx(x)?;
        let w = params.value(weight);
        let xv = &self.nodes[xi].value;
        if w.len() != xv.cols() {
            return Err(NnError::Shape(format!(
                "hadamard of {} columns with {} weights",
                xv.cols(),
                w.len()
            )));
        }
        let mut out = xv.clone();
        for b in 0..out.rows() {
            for (v, &wk) in out.row_mut(b).iter_mut().zip(w) {
                *v = *v * wk;
            }
        }
        let rg = self.param_grads || self.grad_of(&[xi]);
        Ok(self.push(out, Op::Hadamard { x: xi, weight }, rg))
    }

    /// Sum of every element, as a `1 x 1` value.
    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.as_slice().iter().copied().sum::<T>();
        let rg = self.grad_of(&[xi]);
        Ok(self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum { x: xi }, rg))
    }

    /// Mean Huber loss of a `n x 1` prediction column against `target`.
    pub fn huber(&mut self, pred: Var, target: &[T], delta: T) -> Result<Var, NnError> {
        let pi = self.idx(pred)?;
        let pv = &self.nodes[pi].value;
        if pv.cols() != 1 {
            return Err(NnError::Shape(format!(
                "huber expects one prediction column, got {}",
                pv.cols()
            )));
        }
        let loss = ops::huber_loss(pv.as_slice(), target, delta)?;
        let rg = self.grad_of(&[pi]);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::Huber {
                pred: pi,
                target: target.to_vec(),
                delta,
            },
            rg,
        ))
    }

    /// Exact gradients of the scalar `loss`. Parameter gradients are added to
    /// the store's gradient buffers (call `zero_grad` first to overwrite).
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<Gradients<T>, NnError> {
        if !self.param_grads {
            return self.backward_inputs(loss, params);
        }
        let mut grads = params.take_grads();
        let out = self.run_backward(loss, params, Some(&mut grads));
        params.restore_grads(grads);
        out
    }

    /// Input adjoints only; parameter gradients are neither computed nor stored.
    pub fn backward_inputs(
        &self,
        loss: Var,
        params: &ParamStore<T>,
    ) -> Result<Gradients<T>, NnError> {
        self.run_backward(loss, params, None)
    }

    fn run_backward(
        &self,
        loss: Var,
        params: &ParamStore<T>,
        mut pgrads: Option<&mut Vec<Vec<T>>>,
    ) -> Result<Gradients<T>, NnError> {
        if self.nodes.is_empty() || loss.tape != self.id {
            return Err(NnError::NoForward);
        }
        if let Some(v) = self.params_version {
            if v != params.version() {
                return Err(NnError::StaleTape);
            }
        }
        let li = loss.index;
        if self.nodes[li].value.shape() != (1, 1) {
            return Err(NnError::Shape(format!(
                "loss must be 1 x 1, got {:?}",
                self.nodes[li].value.shape()
            )));
        }

        let mut adj: Vec<Option<Matrix<T>>> = (0..=li).map(|_| None).collect();
        adj[li] = Some(Matrix::filled(1, 1, T::one()));
        let mut inputs = HashMap::new();

        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    inputs.insert(i, g);
                }
                Op::Affine { x, weight, bias } => {
                    let xv = &self.nodes[*x].value;
                    if let Some(pg) = pgrads.as_deref_mut() {
                        let (wg, bg) = two_mut(pg, weight.index(), bias.index());
                        affine_backward_params(xv, &g, wg, bg);
                    }
                    if self.nodes[*x].requires_grad {
                        let dx = affine_backward_input(&g, params.value(*weight), xv.cols());
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    normed,
                    std,
                } => {
                    if self.nodes[*x].requires_grad {
                        let gv = params.value(*gain);
                        let n = T::from_usize(g.cols()).expect("length fits scalar");
                        let mut dx = Matrix::zeros(g.rows(), g.cols());
                        for b in 0..g.rows() {
                            let (gr, xr) = (g.row(b), normed.row(b));
                            let gy: Vec<T> = gr.iter().zip(gv).map(|(&a, &w)| a * w).collect();
                            let mean_gy = gy.iter().copied().sum::<T>() / n;
                            let mean_gyx = gy.iter().zip(xr).map(|(&a, &h)| a * h).sum::<T>() / n;
                            for (k, d) in dx.row_mut(b).iter_mut().enumerate() {
                                *d = (gy[k] - mean_gy - xr[k] * mean_gyx) / std[b];
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                    if let Some(pg) = pgrads.as_deref_mut() {
                        let (gg, og) = two_mut(pg, gain.index(), offset.index());
                        for b in 0..g.rows() {
                            let (gr, xr) = (g.row(b), normed.row(b));
                            for k in 0..gr.len() {
                                gg[k] += gr[k] * xr[k];
                                og[k] += gr[k];
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *d = *d * gelu_derivative(v);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Concat { left, right } => {
                    let lc = self.nodes[*left].value.cols();
                    let rc = self.nodes[*right].value.cols();
                    if self.nodes[*left].requires_grad {
                        let mut dl = Matrix::zeros(g.rows(), lc);
                        for b in 0..g.rows() {
                            dl.row_mut(b).copy_from_slice(&g.row(b)[..lc]);
                        }
                        accumulate(&mut adj, *left, dl);
                    }
                    if self.nodes[*right].requires_grad {
                        let mut dr = Matrix::zeros(g.rows(), rc);
                        for b in 0..g.rows() {
                            dr.row_mut(b).copy_from_slice(&g.row(b)[lc..]);
                        }
                        accumulate(&mut adj, *right, dr);
                    }
                }
                Op::SoftmaxTemperature {
                    logits,
                    log_tau,
                    tau,
                } => {
                    let y = &node.value;
                    let z = &self.nodes[*logits].value;
                    let mut dz = Matrix::zeros(g.rows(), g.cols());
                    let mut dlog_tau = T::zero();
                    for b in 0..g.rows() {
                        let (gr, yr, zr) = (g.row(b), y.row(b), z.row(b));
                        let inner = gr.iter().zip(yr).map(|(&a, &w)| a * w).sum::<T>();
                        for k in 0..gr.len() {
                            let du = yr[k] * (gr[k] - inner);
                            dz.set(b, k, du / *tau);
                            dlog_tau -= du * zr[k] / *tau;
                        }
                    }
                    if let Some(pg) = pgrads.as_deref_mut() {
                        pg[log_tau.index()][0] += dlog_tau;
                    }
                    if self.nodes[*logits].requires_grad {
                        accumulate(&mut adj, *logits, dz);
                    }
                }
                Op::ScaleByColumn { x, scale, col } => {
                    let xv = &self.nodes[*x].value;
                    let sv = &self.nodes[*scale].value;
                    if self.nodes[*scale].requires_grad {
                        let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                        for b in 0..g.rows() {
                            let d = g
                                .row(b)
                                .iter()
                                .zip(xv.row(b))
                                .map(|(&a, &v)| a * v)
                                .sum::<T>();
                            ds.set(b, *col, d);
                        }
                        accumulate(&mut adj, *scale, ds);
                    }
                    if self.nodes[*x].requires_grad {
                        let mut dx = g;
                        for b in 0..dx.rows() {
                            let s = sv.get(b, *col);
                            for v in dx.row_mut(b) {
                                *v = *v * s;
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::ScaleByParam { x, scale } => {
                    let xv = &self.nodes[*x].value;
                    if let Some(pg) = pgrads.as_deref_mut() {
                        let d = g
                            .as_slice()
                            .iter()
                            .zip(xv.as_slice())
                            .map(|(&a, &v)| a * v)
                            .sum::<T>();
                        pg[scale.index()][0] += d;
                    }
                    if self.nodes[*x].requires_grad {
                        let s = params.value(*scale)[0];
                        accumulate(&mut adj, *x, g.map(|v| v * s));
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, &m) in dx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *d = *d * m;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Hadamard { x, weight } => {
                    let xv = &self.nodes[*x].value;
                    if let Some(pg) = pgrads.as_deref_mut() {
                        let wg = &mut pg[weight.index()];
                        for b in 0..g.rows() {
                            for (k, w) in wg.iter_mut().enumerate() {
                                *w += g.get(b, k) * xv.get(b, k);
                            }
                        }
                    }
                    if self.nodes[*x].requires_grad {
                        let w = params.value(*weight);
                        let mut dx = g;
                        for b in 0..dx.rows() {
                            for (v, &wk) in dx.row_mut(b).iter_mut().zip(w) {
                                *v = *v * wk;
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Sum { x } => {
                    let (r, c) = self.nodes[*x].value.shape();
                    accumulate(&mut adj, *x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Huber {
                    pred,
                    target,
                    delta,
                } => {
                    let pv = &self.nodes[*pred].value;
                    let n = T::from_usize(target.len()).expect("length fits scalar");
                    let scale = g.get(0, 0) / n;
                    let dp: Vec<T> = pv
                        .as_slice()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| scale * huber_derivative(p - t, *delta))
                        .collect();
                    accumulate(&mut adj, *pred, Matrix::from_vec(pv.rows(), 1, dp));
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            inputs,
        })
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Matrix<T>>], at: usize, g: Matrix<T>) {
    match &mut adj[at] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
