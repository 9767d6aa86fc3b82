//! Exploration schedule and the episode-return moving average.

/// Uniform-random warmup followed by a linear ε decay: 1.0 → 0.1 over the
/// first 100 000 iterations, constant 0.1 afterwards.
#[derive(Debug, Clone, Copy)]
pub struct ExplorationSchedule {
    pub warmup: u64,
    pub eps_start: f32,
    pub eps_end: f32,
    pub decay_steps: u64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule { warmup: 5000, eps_start: 1.0, eps_end: 0.1, decay_steps: 100_000 }
    }
}

impl ExplorationSchedule {
    /// Whether step `t` is still in the accumulate-experience phase.
    pub fn is_warmup(&self, t: u64) -> bool {
        t < self.warmup
    }

    /// ε(t): piecewise linear, non-increasing, within [eps_end, eps_start].
    pub fn epsilon(&self, t: u64) -> f32 {
        let frac = (t.min(self.decay_steps) as f64) / self.decay_steps as f64;
        self.eps_start - (self.eps_start - self.eps_end) * frac as f32
    }
}

/// avg_return update: 0.99·prev + 0.01·return; the first episode
/// initializes the average to its own return.
pub fn ema_return(prev: Option<f32>, episode_return: f32) -> f32 {
    match prev {
        None => episode_return,
        Some(p) => 0.99 * p + 0.01 * episode_return,
    }
}
