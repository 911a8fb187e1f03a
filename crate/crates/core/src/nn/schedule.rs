use serde::{Deserialize, Serialize};

use super::NnError;

/// Cosine one-cycle learning rate: warm up from `max_lr / div_factor` to
/// `max_lr` over the first `pct_start` of the run, then anneal to
/// `max_lr / final_div_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div_factor
    }

    pub fn peak_step(&self) -> f64 {
        self.pct_start * self.total_steps as f64
    }

    pub fn lr(&self, step: usize) -> Result<f64, NnError> {
        if step > self.total_steps {
            return Err(NnError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let t = step as f64;
        let peak = self.peak_step();
        let total = self.total_steps as f64;
        Ok(if t <= peak && peak > 0.0 {
            cosine(self.initial_lr(), self.max_lr, t / peak)
        } else if total > peak {
            cosine(self.max_lr, self.final_lr(), (t - peak) / (total - peak))
        } else {
            self.max_lr
        })
    }
}

fn cosine(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0)
}
