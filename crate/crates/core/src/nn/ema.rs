use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NnError;
use crate::scalar::Scalar;

/// How the shadow starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaInit {
    /// Copy of the initial parameters; the average is the shadow itself.
    Copy,
    /// Zeros; the average divides the shadow by `1 - decay^k` after `k`
    /// updates, so no weight remains on the starting point.
    #[default]
    ZeroDebiased,
}

/// Exponential moving average of every array in a [`ParamStore`]:
/// `shadow = decay * shadow + (1 - decay) * param` after each step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    decay: T,
    init: EmaInit,
    updates: u64,
    shadow: Vec<Vec<T>>,
}

impl<T: Scalar> EmaState<T> {
    pub fn with_init(params: &ParamStore<T>, decay: T, init: EmaInit) -> Self {
        let shadow = params
            .iter()
            .map(|(_, p)| match init {
                EmaInit::Copy => p.value.clone(),
                EmaInit::ZeroDebiased => vec![T::zero(); p.len()],
            })
            .collect();
        Self {
            decay,
            init,
            updates: 0,
            shadow,
        }
    }

    /// Shadow initialized to a copy of the current parameters.
    pub fn new(params: &ParamStore<T>, decay: T) -> Self {
        Self::with_init(params, decay, EmaInit::Copy)
    }

    /// Shadow initialized to zero, with bias-corrected [`EmaState::average`].
    pub fn zeros(params: &ParamStore<T>, decay: T) -> Self {
        Self::with_init(params, decay, EmaInit::ZeroDebiased)
    }

    pub fn from_shadow(shadow: Vec<Vec<T>>, decay: T) -> Self {
        Self {
            decay,
            init: EmaInit::Copy,
            updates: 0,
            shadow,
        }
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn init(&self) -> EmaInit {
        self.init
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Raw shadow values, without bias correction.
    pub fn shadow(&self) -> &[Vec<T>] {
        &self.shadow
    }

    pub fn update(&mut self, params: &ParamStore<T>) -> Result<(), NnError> {
        if params.len() != self.shadow.len() {
            return Err(NnError::Shape(format!(
                "ema tracks {} arrays, store has {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (s, (_, p)) in self.shadow.iter().zip(params.iter()) {
            if s.len() != p.len() {
                return Err(NnError::Shape(format!(
                    "ema shadow of `{}` has {} elements",
                    p.name,
                    s.len()
                )));
            }
        }
        let d = self.decay;
        let one_d = T::one() - d;
        for (s, (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (sv, &pv) in s.iter_mut().zip(&p.value) {
                *sv = d * *sv + one_d * pv;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// The averaged weights. `None` for a zero-initialized average that has
    /// not seen an update yet.
    pub fn average(&self) -> Option<Vec<Vec<T>>> {
        match self.init {
            EmaInit::Copy => Some(self.shadow.clone()),
            EmaInit::ZeroDebiased if self.updates == 0 => None,
            EmaInit::ZeroDebiased => {
                let correction =
                    T::one() - self.decay.powi(self.updates.min(i32::MAX as u64) as i32);
                Some(
                    self.shadow
                        .iter()
                        .map(|s| s.iter().map(|&v| v / correction).collect())
                        .collect(),
                )
            }
        }
    }

    /// Copy of `params` with values replaced by the average, or unchanged
    /// when there is nothing to average yet.
    pub fn apply_to(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut out = params.clone();
        if let Some(avg) = self.average() {
            for (p, s) in out.params_mut().iter_mut().zip(avg) {
                p.value.copy_from_slice(&s);
            }
        }
        out
    }
}
