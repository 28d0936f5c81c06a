//! Plateau-triggered curriculum: one more (harder) view after a run of
//! non-improving epochs.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub n_max: usize,
    pub delta: f64,
    pub patience: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { n_max: 6, delta: 1e-4, patience: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub current_n: usize,
    pub stagnation_count: usize,
    pub best_metric: f64,
    pub epoch: usize,
}

impl Default for SchedulerState {
    fn default() -> Self {
        SchedulerState { current_n: 1, stagnation_count: 0, best_metric: f64::NEG_INFINITY, epoch: 0 }
    }
}

/// Consumes one epoch's metric (higher is better).
///
/// A gain of more than `delta` over the best metric resets the counter;
/// otherwise it grows, and reaching `patience` below the ceiling adds a
/// view and restarts the baseline at the current metric.
pub fn scheduler_step(state: SchedulerState, epoch_metric: f64, cfg: &SchedulerConfig) -> SchedulerState {
    let mut next = state;
    next.epoch += 1;
    if epoch_metric > state.best_metric + cfg.delta {
        next.best_metric = epoch_metric;
        next.stagnation_count = 0;
        return next;
    }
    next.stagnation_count += 1;
    if next.stagnation_count >= cfg.patience && next.current_n < cfg.n_max {
        next.current_n += 1;
        next.stagnation_count = 0;
        next.best_metric = epoch_metric;
    }
    next
}
