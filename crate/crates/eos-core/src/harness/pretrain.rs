//! Adam pretraining of the source agent whose policy generates the offline
//! buffers.

use crate::env::Environment;
use crate::nn::{QNetwork, QNetworkSpec};
use crate::rl::{OptimizerConfig, ReplayBuffer};

use super::{
    train_online, Algorithm, BatchMode, ExplorationSchedule, HarnessError, RunLog, RunRow,
    TrainConfig,
};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_period: usize,
    pub gamma: f32,
    pub schedule: ExplorationSchedule,
    pub seed: u64,
}

impl PretrainConfig {
    /// Adam(2.5e-4), batch 64, γ=0.99, 10⁶-transition buffer, the standard
    /// exploration schedule.
    pub fn new(total_steps: u64, seed: u64) -> Self {
        PretrainConfig {
            total_steps,
            batch_size: 64,
            buffer_capacity: 1_000_000,
            target_period: 1000,
            gamma: 0.99,
            schedule: ExplorationSchedule::default(),
            seed,
        }
    }
}

#[derive(Debug)]
pub struct PretrainResult {
    pub network: QNetwork,
    /// The trailing `buffer_capacity` transitions of the run; the source
    /// of the final-buffer regime.
    pub replay: ReplayBuffer,
    pub log: RunLog,
    pub episodes: u64,
    pub final_avg_return: Option<f32>,
}

/// Online DQN training with the exploration schedule; returns the final
/// checkpoint plus the replay-buffer tail. Aborts on divergence with the
/// offending step index.
pub fn pretrain_agent<E: Environment>(
    env: &mut E,
    cfg: &PretrainConfig,
    on_row: &mut dyn FnMut(&RunRow),
) -> Result<PretrainResult, HarnessError> {
    let (h, w, c) = env.obs_dims();
    let spec = QNetworkSpec::new((h, w, c), crate::nn::Head::Dqn { num_actions: env.num_actions() });
    let mut train_cfg = TrainConfig::new(
        Algorithm::Dqn,
        OptimizerConfig::adam_pretrain(),
        cfg.total_steps,
        cfg.seed,
    );
    train_cfg.batch = BatchMode::Mini(cfg.batch_size);
    train_cfg.gamma = cfg.gamma;
    train_cfg.target_period = cfg.target_period;
    // Pretraining logs the return curve only; no spectral probes.
    train_cfg.eig_iters = 0;

    let art = train_online(env, &spec, &train_cfg, &cfg.schedule, cfg.buffer_capacity, on_row)?;
    let params = art.params;
    Ok(PretrainResult {
        network: QNetwork { spec, params, seed: cfg.seed },
        replay: art.buffer.expect("online training always returns its buffer"),
        log: art.log,
        episodes: art.episodes,
        final_avg_return: art.avg_return,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Breakout;

    #[test]
    fn pretrain_smoke_deterministic() {
        let cfg = PretrainConfig {
            total_steps: 80,
            batch_size: 8,
            buffer_capacity: 64,
            target_period: 20,
            gamma: 0.99,
            schedule: ExplorationSchedule { warmup: 40, ..Default::default() },
            seed: 5,
        };
        let run = || {
            let mut env = Breakout::new(5);
            pretrain_agent(&mut env, &cfg, &mut |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.network.params.values(), b.network.params.values());
        // Ring capacity bounds the tail.
        assert_eq!(a.replay.len(), 64);
        assert_eq!(a.replay.total_inserted(), 80);
    }

    #[test]
    fn warmup_actions_are_uniform_random() {
        // With a warmup covering the whole run, action choice never
        // consults the network; the recorded was_random flags say so.
        let cfg = PretrainConfig {
            total_steps: 50,
            batch_size: 4,
            buffer_capacity: 128,
            target_period: 10,
            gamma: 0.99,
            schedule: ExplorationSchedule { warmup: 50, ..Default::default() },
            seed: 9,
        };
        let mut env = Breakout::new(9);
        let result = pretrain_agent(&mut env, &cfg, &mut |_| {}).unwrap();
        assert!(result.replay.iter().all(|t| t.was_random));
        // And an untouched network: no optimizer step ran.
        let fresh = crate::nn::init_params(&result.network.spec, 9);
        assert_eq!(result.network.params.values(), fresh.values());
    }
}
