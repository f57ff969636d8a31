//! Per-step learning rate: linear warmup from zero, then half-cosine to zero.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub current_lr: f64,
}

impl ScheduleState {
    pub fn new(total_steps: u64, warmup_steps: u64, base_lr: f64) -> Self {
        let mut s = Self {
            step: 0,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
            base_lr,
            current_lr: 0.0,
        };
        s.current_lr = lr_at(&s, 0);
        s
    }

    /// Moves to `step` and returns the rate in effect there.
    pub fn seek(&mut self, step: u64) -> f64 {
        self.step = step;
        self.current_lr = lr_at(self, step);
        self.current_lr
    }
}

/// Steps past `total_steps` are clamped to the end of the schedule.
pub fn lr_at(state: &ScheduleState, step: u64) -> f64 {
    let step = step.min(state.total_steps);
    let (w, t) = (state.warmup_steps, state.total_steps);
    if step < w {
        return state.base_lr * step as f64 / w as f64;
    }
    if t == w {
        return state.base_lr;
    }
    let phase = (step - w) as f64 / (t - w) as f64;
    state.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}
