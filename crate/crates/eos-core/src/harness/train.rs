//! Offline and online training loops with periodic λ₁ probes.

use rand::Rng;

use crate::autodiff::{LossGraph, ParamVector, Tensor};
use crate::env::Environment;
use crate::nn::{QNetwork, QNetworkSpec};
use crate::rl::{
    build_c51_loss, build_dqn_loss, c51_target_masses, dqn_target, epsilon_greedy, optimizer_step,
    OptimizerState, ReplayBuffer, RlError, TargetNetwork, Transition,
};
use crate::spectral::{leading_eigenvalue, SpectralError};

use super::{
    ema_return, stream_rng, streams, Algorithm, BatchMode, ExplorationSchedule, HarnessError,
    RunLog, RunRow, TrainConfig,
};

/// Everything a finished run hands back to the caller.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub log: RunLog,
    pub params: ParamVector,
    /// The agent's own replay buffer (online runs only).
    pub buffer: Option<ReplayBuffer>,
    pub episodes: u64,
    pub avg_return: Option<f32>,
}

enum Targets {
    Dqn(Vec<f32>),
    C51(Vec<f32>),
}

fn obs_tensor(spec: &QNetworkSpec, transitions: &[Transition]) -> Tensor {
    let mut data = vec![0.0f32; transitions.len() * spec.obs_len()];
    for (t, chunk) in transitions.iter().zip(data.chunks_exact_mut(spec.obs_len())) {
        t.obs.write_f32(chunk);
    }
    Tensor::new(vec![transitions.len(), spec.input_h, spec.input_w, spec.input_c], data)
}

fn compute_targets(
    spec: &QNetworkSpec,
    target: &TargetNetwork,
    batch: &[Transition],
    cfg: &TrainConfig,
) -> Result<Targets, RlError> {
    match cfg.algorithm {
        Algorithm::Dqn => Ok(Targets::Dqn(dqn_target(spec, target.params(), batch, cfg.gamma)?)),
        Algorithm::C51 => Ok(Targets::C51(c51_target_masses(
            spec,
            target.params(),
            &cfg.support,
            batch,
            cfg.gamma,
        )?)),
    }
}

fn build_loss_graph(
    spec: &QNetworkSpec,
    params: &ParamVector,
    obs: &Tensor,
    actions: &[u8],
    targets: &Targets,
) -> Result<LossGraph, HarnessError> {
    let obs = obs.clone();
    Ok(LossGraph::build(params, |tape, p| match targets {
        Targets::Dqn(y) => build_dqn_loss(tape, spec, p, obs, actions, y),
        Targets::C51(m) => build_c51_loss(tape, spec, p, obs, actions, m),
    })?)
}

fn derive_seed(base: u64, tag: u64, step: u64) -> u64 {
    base ^ tag.rotate_left(24) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// λ₁ of the loss Hessian behind `graph`, by Lanczos over exact HVPs.
fn probe_lambda(
    graph: &mut LossGraph,
    params: &ParamVector,
    iters: usize,
    seed: u64,
    step: u64,
) -> Result<f64, HarnessError> {
    let layout = std::sync::Arc::clone(params.layout());
    let dim = layout.total_len();
    let mut hvp_failed = false;
    let result = leading_eigenvalue(dim, iters, seed, |v| {
        let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let pv = ParamVector::new(std::sync::Arc::clone(&layout), v32).expect("layout fixed");
        match graph.hvp(&pv) {
            Ok(hv) => hv.values().iter().map(|&x| x as f64).collect(),
            Err(_) => {
                hvp_failed = true;
                vec![f64::NAN; dim]
            }
        }
    });
    let (lambda, _residual, _iters) = result.map_err(|e| match e {
        SpectralError::NonFiniteOperator { .. } => HarnessError::Diverged { step, what: "hvp" },
        other => HarnessError::Spectral(other),
    })?;
    if hvp_failed || !lambda.is_finite() {
        return Err(HarnessError::Diverged { step, what: "lambda1" });
    }
    Ok(lambda)
}

/// Mean return of greedy evaluation episodes on a fresh seeded environment;
/// never touches any training buffer.
fn greedy_eval<E: Environment>(
    mk_env: &impl Fn(u64) -> E,
    net: &QNetwork,
    atoms: Option<&[f32]>,
    episodes: usize,
    seed: u64,
) -> Result<f32, HarnessError> {
    let mut env = mk_env(seed);
    let mut obs_f = vec![0.0f32; net.spec.obs_len()];
    let mut total = 0.0f64;
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut ret = 0.0f32;
        loop {
            obs.write_f32(&mut obs_f);
            let q = net.q_values(&obs_f, atoms)?;
            let out = env.step(crate::rl::greedy_action(&q))?;
            ret += out.reward;
            obs = out.obs;
            if out.done {
                break;
            }
        }
        total += ret as f64;
    }
    Ok((total / episodes as f64) as f32)
}

/// Deterministically samples a probe batch from a buffer and tensorizes
/// its observations; the standalone entry point behind the `probe` command.
pub fn probe_batch(
    spec: &QNetworkSpec,
    buffer: &ReplayBuffer,
    size: usize,
    seed: u64,
) -> (Tensor, Vec<u8>, Vec<Transition>) {
    let mut rng = stream_rng(seed, streams::PROBE);
    let idxs = buffer.sample_indices(&mut rng, size.min(buffer.len()));
    let trans: Vec<Transition> = idxs.iter().map(|&i| *buffer.get(i)).collect();
    let obs = obs_tensor(spec, &trans);
    let actions: Vec<u8> = trans.iter().map(|t| t.action).collect();
    (obs, actions, trans)
}

struct Learner {
    net: QNetwork,
    target: TargetNetwork,
    opt_state: OptimizerState,
}

impl Learner {
    fn new(spec: &QNetworkSpec, cfg: &TrainConfig) -> Self {
        let net = QNetwork::init(spec.clone(), cfg.seed);
        let target = TargetNetwork::new(net.params.clone(), cfg.target_period);
        let opt_state = OptimizerState::new(&cfg.optimizer, net.params.len());
        Learner { net, target, opt_state }
    }

    /// Applies the gradient of `graph` and ticks the target network.
    /// Returns true when the target just synced.
    fn apply_gradient(
        &mut self,
        graph: &mut LossGraph,
        cfg: &TrainConfig,
        step: u64,
    ) -> Result<bool, HarnessError> {
        let grad = graph.gradient()?;
        if !grad.all_finite() {
            return Err(HarnessError::Diverged { step, what: "gradient" });
        }
        optimizer_step(&cfg.optimizer, &mut self.opt_state, &mut self.net.params, &grad)?;
        Ok(self.target.tick(&self.net.params))
    }
}

/// Trains on a frozen buffer: pure optimization, no environment interaction
/// beyond optional greedy evaluation rollouts on a separate seeded
/// environment.
pub fn train_offline<E: Environment>(
    spec: &QNetworkSpec,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    mk_eval_env: Option<&impl Fn(u64) -> E>,
    on_row: &mut dyn FnMut(&RunRow),
) -> Result<TrainArtifacts, HarnessError> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(HarnessError::EmptyBuffer);
    }
    let atoms = cfg.support.atoms();
    let atoms_opt = match cfg.algorithm {
        Algorithm::C51 => Some(atoms.as_slice()),
        Algorithm::Dqn => None,
    };
    let mut learner = Learner::new(spec, cfg);
    let mut batch_rng = stream_rng(cfg.seed, streams::BATCH);
    let mut probe_rng = stream_rng(cfg.seed, streams::PROBE);
    let threshold = cfg.threshold();

    // Full-batch mode freezes one subsample (without replacement) and its
    // tensorized observations for the whole run. Targets are constant
    // between target syncs, so they are recomputed only there.
    let full_batch: Option<(Vec<Transition>, Tensor, Vec<u8>)> = match cfg.batch {
        BatchMode::Full => {
            let n = cfg.full_batch_subsample.min(buffer.len());
            let mut picked = Vec::with_capacity(n);
            let mut seen = std::collections::HashSet::new();
            while picked.len() < n {
                let i = batch_rng.gen_range(0..buffer.len());
                if seen.insert(i) {
                    picked.push(*buffer.get(i));
                }
            }
            let obs = obs_tensor(spec, &picked);
            let actions: Vec<u8> = picked.iter().map(|t| t.action).collect();
            Some((picked, obs, actions))
        }
        BatchMode::Mini(_) => None,
    };
    let mut full_targets: Option<Targets> = match &full_batch {
        Some((trans, _, _)) => Some(compute_targets(spec, &learner.target, trans, cfg)?),
        None => None,
    };

    let mut log = RunLog::default();
    let mut avg_return: Option<f32> = None;
    let mut episodes = 0u64;

    for step in 0..cfg.total_steps {
        if let Some(mk) = mk_eval_env {
            if cfg.eval_period > 0 && step % cfg.eval_period == 0 && cfg.eval_episodes > 0 {
                let eval_seed = derive_seed(cfg.seed, streams::EVAL_ENV, step);
                avg_return = Some(greedy_eval(
                    mk,
                    &learner.net,
                    atoms_opt,
                    cfg.eval_episodes,
                    eval_seed,
                )?);
                episodes += cfg.eval_episodes as u64;
            }
        }

        let mut graph;
        let mini_batch;
        match &full_batch {
            Some((_, obs, actions)) => {
                graph = build_loss_graph(
                    spec,
                    &learner.net.params,
                    obs,
                    actions,
                    full_targets.as_ref().expect("full-batch targets"),
                )?;
                mini_batch = None;
            }
            None => {
                let BatchMode::Mini(bsz) = cfg.batch else { unreachable!() };
                let idxs = buffer.sample_indices(&mut batch_rng, bsz);
                let trans: Vec<Transition> = idxs.iter().map(|&i| *buffer.get(i)).collect();
                let obs = obs_tensor(spec, &trans);
                let actions: Vec<u8> = trans.iter().map(|t| t.action).collect();
                let targets = compute_targets(spec, &learner.target, &trans, cfg)?;
                graph = build_loss_graph(spec, &learner.net.params, &obs, &actions, &targets)?;
                mini_batch = Some(());
            }
        }
        let loss = graph.loss_value();
        if !loss.is_finite() {
            return Err(HarnessError::Diverged { step, what: "loss" });
        }

        let probe_due = cfg.eig_iters > 0 && step % cfg.eig_log_period == 0;
        let lambda1 = if probe_due {
            let seed = derive_seed(cfg.seed, streams::LANCZOS, step);
            let l = match mini_batch {
                // Full batch: λ₁ of the very loss being optimized this step.
                None => probe_lambda(&mut graph, &learner.net.params, cfg.eig_iters, seed, step)?,
                // Mini batch: one freshly sampled, fixed probe batch.
                Some(()) => {
                    let bsz = match cfg.batch {
                        BatchMode::Mini(_) => 512,
                        BatchMode::Full => unreachable!(),
                    };
                    let idxs = buffer.sample_indices(&mut probe_rng, bsz.min(buffer.len()));
                    let trans: Vec<Transition> = idxs.iter().map(|&i| *buffer.get(i)).collect();
                    let obs = obs_tensor(spec, &trans);
                    let actions: Vec<u8> = trans.iter().map(|t| t.action).collect();
                    let targets = compute_targets(spec, &learner.target, &trans, cfg)?;
                    let mut probe_graph =
                        build_loss_graph(spec, &learner.net.params, &obs, &actions, &targets)?;
                    probe_lambda(&mut probe_graph, &learner.net.params, cfg.eig_iters, seed, step)?
                }
            };
            Some(l)
        } else {
            None
        };

        // Full-batch runs log the loss every step; minibatch runs log on
        // the probe cadence.
        let log_due = match cfg.batch {
            BatchMode::Full => true,
            BatchMode::Mini(_) => step % cfg.eig_log_period == 0,
        };
        if log_due {
            let row =
                RunRow { step, loss: Some(loss), lambda1, threshold, avg_return, episodes };
            on_row(&row);
            log.push(row);
        }

        let synced = learner.apply_gradient(&mut graph, cfg, step)?;
        if synced {
            if let Some((trans, _, _)) = &full_batch {
                full_targets = Some(compute_targets(spec, &learner.target, trans, cfg)?);
            }
        }
    }

    Ok(TrainArtifacts {
        log,
        params: learner.net.params,
        buffer: None,
        episodes,
        avg_return,
    })
}

/// Online training: act, store, learn — one optimizer step per environment
/// step once the warmup has filled the buffer.
pub fn train_online<E: Environment>(
    env: &mut E,
    spec: &QNetworkSpec,
    cfg: &TrainConfig,
    schedule: &ExplorationSchedule,
    buffer_capacity: usize,
    on_row: &mut dyn FnMut(&RunRow),
) -> Result<TrainArtifacts, HarnessError> {
    cfg.validate()?;
    let BatchMode::Mini(bsz) = cfg.batch else {
        return Err(HarnessError::BadConfig("online training requires minibatches".into()));
    };
    let atoms = cfg.support.atoms();
    let atoms_opt = match cfg.algorithm {
        Algorithm::C51 => Some(atoms.as_slice()),
        Algorithm::Dqn => None,
    };
    let mut learner = Learner::new(spec, cfg);
    let mut buffer = ReplayBuffer::new(buffer_capacity);
    let mut action_rng = stream_rng(cfg.seed, streams::ACTIONS);
    let mut batch_rng = stream_rng(cfg.seed, streams::BATCH);
    let mut probe_rng = stream_rng(cfg.seed, streams::PROBE);
    let threshold = cfg.threshold();

    let mut log = RunLog::default();
    let mut avg_return: Option<f32> = None;
    let mut episodes = 0u64;
    let mut episode_ret = 0.0f32;
    let mut obs = env.reset();
    let mut obs_f = vec![0.0f32; spec.obs_len()];

    for step in 0..cfg.total_steps {
        obs.write_f32(&mut obs_f);
        let (action, was_random) = if schedule.is_warmup(step) {
            (action_rng.gen_range(0..env.num_actions()), true)
        } else {
            let q = learner.net.q_values(&obs_f, atoms_opt)?;
            epsilon_greedy(&q, schedule.epsilon(step), &mut action_rng)
        };
        let out = env.step(action)?;
        buffer.push(Transition {
            obs,
            action: action as u8,
            reward: out.reward,
            next_obs: out.obs,
            // Truncations bootstrap as non-terminal.
            done: out.done && !out.truncated,
            was_random,
        });
        episode_ret += out.reward;
        if out.done {
            avg_return = Some(ema_return(avg_return, episode_ret));
            episodes += 1;
            episode_ret = 0.0;
            obs = env.reset();
        } else {
            obs = out.obs;
        }

        if schedule.is_warmup(step) {
            continue;
        }

        let idxs = buffer.sample_indices(&mut batch_rng, bsz);
        let trans: Vec<Transition> = idxs.iter().map(|&i| *buffer.get(i)).collect();
        let batch_obs = obs_tensor(spec, &trans);
        let actions: Vec<u8> = trans.iter().map(|t| t.action).collect();
        let targets = compute_targets(spec, &learner.target, &trans, cfg)?;
        let mut graph =
            build_loss_graph(spec, &learner.net.params, &batch_obs, &actions, &targets)?;
        let loss = graph.loss_value();
        if !loss.is_finite() {
            return Err(HarnessError::Diverged { step, what: "loss" });
        }

        let opt_step = step - schedule.warmup;
        let probe_due = cfg.eig_iters > 0 && opt_step % cfg.eig_log_period == 0;
        let lambda1 = if probe_due {
            let idxs = buffer.sample_indices(&mut probe_rng, 512.min(buffer.len()));
            let trans: Vec<Transition> = idxs.iter().map(|&i| *buffer.get(i)).collect();
            let p_obs = obs_tensor(spec, &trans);
            let p_actions: Vec<u8> = trans.iter().map(|t| t.action).collect();
            let p_targets = compute_targets(spec, &learner.target, &trans, cfg)?;
            let mut probe_graph =
                build_loss_graph(spec, &learner.net.params, &p_obs, &p_actions, &p_targets)?;
            let seed = derive_seed(cfg.seed, streams::LANCZOS, step);
            Some(probe_lambda(&mut probe_graph, &learner.net.params, cfg.eig_iters, seed, step)?)
        } else {
            None
        };

        if opt_step % cfg.eig_log_period == 0 {
            let row =
                RunRow { step, loss: Some(loss), lambda1, threshold, avg_return, episodes };
            on_row(&row);
            log.push(row);
        }

        learner.apply_gradient(&mut graph, cfg, step)?;
    }

    Ok(TrainArtifacts {
        log,
        params: learner.net.params,
        buffer: Some(buffer),
        episodes,
        avg_return,
    })
}
