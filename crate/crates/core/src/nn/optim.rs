use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::scalar::Scalar;

/// Decoupled-weight-decay Adam constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments for every array of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.len()])
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` from the store's current gradients:
    /// decay `p *= 1 - lr * wd`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: T) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::lit(c.eps);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let t = self.step as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2_sqrt = (T::one() - b2.powi(t)).sqrt();
        let step_size = lr / bias1;

        for ((p, m), v) in params
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &g), mk), vk) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w = *w * decay;
                *mk = b1 * *mk + one_b1 * g;
                *vk = b2 * *vk + one_b2 * g * g;
                let denom = vk.sqrt() / bias2_sqrt + eps;
                *w = *w - step_size * (*mk / denom);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("w", vec![n], values);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, 0.1);
        assert_eq!(s.value(s.id("w").unwrap()), &[1.0, -2.0, 0.5]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let lr = 0.003;
        opt.step(&mut s, lr);
        let f = 1.0 - lr * 0.01;
        assert_eq!(s.value(s.id("w").unwrap()), &[f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn single_step_matches_textbook_arithmetic() {
        let mut s = store(vec![1.0]);
        let id = s.id("w").unwrap();
        s.grad_mut(id)[0] = 0.5;
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.001);
        // p = 1 * (1 - 1e-5); m = 0.05, v = 2.5e-4; m_hat = 0.5, v_hat = 0.25
        let expected = 0.99999 - 0.001 * 0.5 / (0.5 + 1e-8);
        assert_abs_diff_eq!(s.value(id)[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.998_990_000_02, epsilon = 1e-12);
    }
}
