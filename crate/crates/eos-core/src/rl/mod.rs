//! Replay storage, behaviour policies, the DQN and C51 losses, target
//! networks and the three optimizers.

mod loss;
mod optim;
mod policy;
mod replay;

pub use loss::{
    build_c51_loss, build_dqn_loss, c51_loss, c51_target_masses, categorical_project, dqn_target,
    huber_loss, CategoricalSupport,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
pub use policy::{epsilon_greedy, greedy_action};
pub use replay::{ReplayBuffer, Transition};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("target probabilities sum to {0}, expected 1")]
    UnnormalizedTarget(f32),
    #[error("optimizer state does not match parameter layout")]
    StateMismatch,
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),
}

/// Frozen parameter copy θ̂ used to build bootstrap targets; synced from the
/// online parameters every `period` optimizer steps.
#[derive(Debug, Clone)]
pub struct TargetNetwork {
    params: crate::autodiff::ParamVector,
    steps_since_sync: usize,
    period: usize,
}

impl TargetNetwork {
    pub fn new(params: crate::autodiff::ParamVector, period: usize) -> Self {
        assert!(period >= 1);
        TargetNetwork { params, steps_since_sync: 0, period }
    }

    pub fn params(&self) -> &crate::autodiff::ParamVector {
        &self.params
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// Counts one optimizer step; copies `online` into the frozen slot when
    /// the period elapses. Returns true on sync.
    pub fn tick(&mut self, online: &crate::autodiff::ParamVector) -> bool {
        self.steps_since_sync += 1;
        if self.steps_since_sync >= self.period {
            self.params = online.clone();
            self.steps_since_sync = 0;
            true
        } else {
            false
        }
    }
}
