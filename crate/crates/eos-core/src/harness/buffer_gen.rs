//! Offline buffer construction from a pretrained checkpoint.

use crate::env::Environment;
use crate::nn::QNetwork;
use crate::rl::{epsilon_greedy, greedy_action, CategoricalSupport, ReplayBuffer, Transition};

use super::{stream_rng, streams, HarnessError, RegimeKind, RegimeSpec};

/// Rolls the checkpoint's policy in `env` until `regime.buffer_size`
/// transitions are stored. Greedy for the greedy regime; greedy with
/// probability 1−ε_random and uniform otherwise for the ε-greedy one, with
/// the branch recorded per transition.
pub fn generate_buffer<E: Environment>(
    regime: &RegimeSpec,
    checkpoint: &QNetwork,
    env: &mut E,
    seed: u64,
) -> Result<ReplayBuffer, HarnessError> {
    let eps = match regime.kind {
        RegimeKind::OfflineGreedy => 0.0,
        RegimeKind::OfflineEpsGreedy => regime.eps_random,
        RegimeKind::FinalBuffer | RegimeKind::Online => {
            return Err(HarnessError::BadConfig(format!(
                "generate_buffer expects a rollout regime, got {:?}",
                regime.kind
            )))
        }
    };
    let atoms_vec;
    let atoms = match checkpoint.spec.head {
        crate::nn::Head::C51 { num_atoms, .. } => {
            let support = CategoricalSupport { n: num_atoms, ..CategoricalSupport::c51() };
            atoms_vec = support.atoms();
            Some(atoms_vec.as_slice())
        }
        crate::nn::Head::Dqn { .. } => None,
    };
    let mut rng = stream_rng(seed, streams::ACTIONS);
    let mut buffer = ReplayBuffer::new(regime.buffer_size);
    let mut obs = env.reset();
    let mut obs_f = vec![0.0f32; checkpoint.spec.obs_len()];
    while buffer.len() < regime.buffer_size {
        obs.write_f32(&mut obs_f);
        let q = checkpoint.q_values(&obs_f, atoms)?;
        let (action, was_random) = if eps == 0.0 {
            (greedy_action(&q), false)
        } else {
            epsilon_greedy(&q, eps, &mut rng)
        };
        let out = env.step(action)?;
        buffer.push(Transition {
            obs,
            action: action as u8,
            reward: out.reward,
            next_obs: out.obs,
            done: out.done && !out.truncated,
            was_random,
        });
        obs = if out.done { env.reset() } else { out.obs };
    }
    Ok(buffer)
}

/// The final-buffer regime: the last `size` transitions the pretrainer
/// recorded, in insertion order. Errors when fewer are available.
pub fn final_buffer(pretrain_tail: &ReplayBuffer, size: usize) -> Result<ReplayBuffer, HarnessError> {
    if pretrain_tail.len() < size {
        return Err(HarnessError::MissingPretrainBuffer);
    }
    let mut out = ReplayBuffer::new(size);
    let skip = pretrain_tail.len() - size;
    for i in skip..pretrain_tail.len() {
        out.push(*pretrain_tail.get(i));
    }
    Ok(out)
}
