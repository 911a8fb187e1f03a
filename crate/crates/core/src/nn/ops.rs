//! Pointwise and per-vector primitives. The tape calls these row by row, so
//! the forward values here are exactly the values the model computes.

use rand::{Rng, RngCore};

use super::NnError;
use crate::scalar::Scalar;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

#[inline]
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::lit(0.5)).exp()
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

/// Mean and biased variance of `x`.
pub fn moments<T: Scalar>(x: &[T]) -> (T, T) {
    let n = T::from_usize(x.len()).expect("length fits scalar");
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

/// `(x - mean) / sqrt(var + eps) * gain + offset`.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], offset: &[T], eps: T) -> Vec<T> {
    debug_assert!(x.len() == gain.len() && x.len() == offset.len());
    let (mean, var) = moments(x);
    let std = (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(offset))
        .map(|(&v, (&g, &o))| (v - mean) / std * g + o)
        .collect()
}

/// `softmax(logits / tau)`.
pub fn softmax_temperature<T: Scalar>(logits: &[T], tau: T) -> Result<Vec<T>, NnError> {
    if !(tau > T::zero()) {
        return Err(NnError::Domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(softmax_scaled(logits, tau))
}

pub(crate) fn softmax_scaled<T: Scalar>(logits: &[T], tau: T) -> Vec<T> {
    let scaled: Vec<T> = logits.iter().map(|&z| z / tau).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&u| (u - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverted dropout mask: `0` with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut (impl RngCore + ?Sized)) -> Vec<T> {
    if p <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// Applies inverted dropout when `training` carries a generator; identity otherwise.
pub fn dropout<T: Scalar>(x: &[T], p: f64, training: Option<&mut dyn RngCore>) -> Vec<T> {
    match training {
        Some(rng) if p > 0.0 => {
            let mask = dropout_mask::<T>(x.len(), p, rng);
            x.iter().zip(mask).map(|(&v, m)| v * m).collect()
        }
        _ => x.to_vec(),
    }
}

/// Mean Huber loss over elementwise residuals `pred - target`.
pub fn huber_loss<T: Scalar>(pred: &[T], target: &[T], delta: T) -> Result<T, NnError> {
    if pred.len() != target.len() {
        return Err(NnError::Shape(format!(
            "huber: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(NnError::Shape("huber: empty input".into()));
    }
    let n = T::from_usize(pred.len()).expect("length fits scalar");
    let total: T = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| huber_term(p - t, delta))
        .sum();
    Ok(total / n)
}

#[inline]
pub(crate) fn huber_term<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::lit(0.5) * r * r
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

/// Derivative of one Huber term with respect to the residual.
#[inline]
pub fn huber_derivative<T: Scalar>(r: T, delta: T) -> T {
    r.max(-delta).min(delta)
}
