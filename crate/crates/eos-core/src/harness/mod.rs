//! The four data regimes, pretraining, and the training loops that tie the
//! loss, optimizer and spectral probe together.

mod buffer_gen;
mod pretrain;
mod schedule;
mod train;

pub use buffer_gen::{final_buffer, generate_buffer};
pub use pretrain::{pretrain_agent, PretrainConfig, PretrainResult};
pub use schedule::{ema_return, ExplorationSchedule};
pub use train::{probe_batch, train_offline, train_online, TrainArtifacts};

use thiserror::Error;

use crate::rl::{CategoricalSupport, OptimizerConfig, RlError};
use crate::spectral::SpectralError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("non-finite {what} at step {step}; aborting")]
    Diverged { step: u64, what: &'static str },
    #[error("offline regime requires a buffer with at least one transition")]
    EmptyBuffer,
    #[error("final-buffer regime requires the pretrainer's persisted transitions")]
    MissingPretrainBuffer,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

/// Which data regime feeds the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    /// Fixed buffer rolled out by a pretrained agent's greedy policy.
    OfflineGreedy,
    /// Fixed buffer rolled out ε-greedily (greedy w.p. 0.7, random 0.3).
    OfflineEpsGreedy,
    /// The last `buffer_size` transitions of the pretrainer's online run.
    FinalBuffer,
    /// The agent learns from its own growing buffer.
    Online,
}

#[derive(Debug, Clone, Copy)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    /// Random-action probability for the ε-greedy offline regime.
    pub eps_random: f32,
    pub buffer_size: usize,
}

impl RegimeSpec {
    pub fn new(kind: RegimeKind) -> Self {
        RegimeSpec { kind, eps_random: 0.3, buffer_size: 1_000_000 }
    }

    pub fn is_offline(&self) -> bool {
        !matches!(self.kind, RegimeKind::Online)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Dqn,
    C51,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Uniform with-replacement minibatches of this size.
    Mini(usize),
    /// One frozen subsample used for every gradient step.
    Full,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub optimizer: OptimizerConfig,
    pub gamma: f32,
    pub batch: BatchMode,
    /// Frozen subsample size for full-batch training.
    pub full_batch_subsample: usize,
    /// Target-network sync period C, in optimizer steps.
    pub target_period: usize,
    pub total_steps: u64,
    /// λ₁ is estimated every this many steps.
    pub eig_log_period: u64,
    /// Lanczos iterations per estimate.
    pub eig_iters: usize,
    pub support: CategoricalSupport,
    /// Greedy evaluation cadence and episode count for offline runs.
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Training defaults: γ=0.99, batch 512, C=1000, λ₁ every 100 steps
    /// with 30 Lanczos iterations, 51-atom support on [−10, 10].
    pub fn new(algorithm: Algorithm, optimizer: OptimizerConfig, total_steps: u64, seed: u64) -> Self {
        TrainConfig {
            algorithm,
            optimizer,
            gamma: 0.99,
            batch: BatchMode::Mini(512),
            full_batch_subsample: 10_000,
            target_period: 1000,
            total_steps,
            eig_log_period: 100,
            eig_iters: 30,
            support: CategoricalSupport::c51(),
            eval_period: 5000,
            eval_episodes: 10,
            seed,
        }
    }

    /// The divergence threshold implied by the optimizer, when it has one
    /// (Adam does not).
    pub fn threshold(&self) -> Option<f64> {
        match self.optimizer {
            OptimizerConfig::Adam { .. } => None,
            ref opt => {
                crate::spectral::divergence_threshold(opt.lr(), opt.momentum_beta()).ok()
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.optimizer.validate().map_err(HarnessError::BadConfig)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(HarnessError::BadConfig(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.eig_log_period == 0 {
            return Err(HarnessError::BadConfig("eig_log_period must be ≥ 1".into()));
        }
        if let BatchMode::Mini(n) = self.batch {
            if n == 0 {
                return Err(HarnessError::BadConfig("batch size must be ≥ 1".into()));
            }
        }
        Ok(())
    }
}

/// One metrics row; missing values stay empty in the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: u64,
    pub loss: Option<f32>,
    pub lambda1: Option<f64>,
    pub threshold: Option<f64>,
    pub avg_return: Option<f32>,
    pub episodes: u64,
}

/// Time-indexed series backing the metrics CSV and the plots.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn push(&mut self, row: RunRow) {
        debug_assert!(self.rows.last().map_or(true, |r| row.step > r.step));
        self.rows.push(row);
    }

    /// The (step, λ₁) sub-series.
    pub fn lambda_series(&self) -> Vec<(u64, f64)> {
        self.rows.iter().filter_map(|r| r.lambda1.map(|l| (r.step, l))).collect()
    }
}

/// Derives an independent ChaCha stream from a base seed; fixed stream ids
/// keep every random consumer decoupled.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const ACTIONS: u64 = 0;
    pub const BATCH: u64 = 1;
    pub const PROBE: u64 = 2;
    pub const EVAL_ENV: u64 = 4;
    pub const LANCZOS: u64 = 5;
}
