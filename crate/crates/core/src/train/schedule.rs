//! One-cycle learning-rate policy.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warm_fraction: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            max_lr: 0.01,
            warm_fraction: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
            total_steps,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div
    }

    pub fn warm_steps(&self) -> usize {
        ((self.warm_fraction * self.total_steps as f64).round() as usize).max(1)
    }
}

/// Cosine interpolation from `from` (t = 0) to `to` (t = 1).
fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (PI * t).cos())
}

pub fn one_cycle_lr(step: usize, s: &LrSchedule) -> f64 {
    if s.total_steps == 0 {
        return s.initial_lr();
    }
    let step = step.min(s.total_steps);
    let warm = s.warm_steps().min(s.total_steps);
    if step <= warm {
        cosine(s.initial_lr(), s.max_lr, step as f64 / warm as f64)
    } else {
        let t = (step - warm) as f64 / (s.total_steps - warm) as f64;
        cosine(s.max_lr, s.final_lr(), t)
    }
}
