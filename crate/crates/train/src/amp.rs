//! Dynamic loss scaling for half-precision backward passes.

use serde::{Deserialize, Serialize};

pub const INIT_SCALE: f64 = 65536.0;
pub const GROWTH_INTERVAL: u64 = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub enabled: bool,
    pub scale: f64,
    /// Consecutive steps with finite gradients since the last change.
    pub good_steps: u64,
}

impl LossScaler {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            scale: if enabled { INIT_SCALE } else { 1.0 },
            good_steps: 0,
        }
    }

    /// Records the outcome of one backward pass; returns whether the
    /// optimizer step should be applied.
    pub fn update(&mut self, grads_finite: bool) -> bool {
        if !self.enabled {
            return grads_finite;
        }
        if grads_finite {
            self.good_steps += 1;
            if self.good_steps == GROWTH_INTERVAL {
                self.scale *= 2.0;
                self.good_steps = 0;
            }
            true
        } else {
            self.scale *= 0.5;
            self.good_steps = 0;
            false
        }
    }
}
