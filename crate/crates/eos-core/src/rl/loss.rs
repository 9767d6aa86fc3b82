//! The DQN Huber regression loss and the C51 categorical cross-entropy,
//! plus target construction for both. Targets are always computed outside
//! the tape (the bootstrapped term is a constant per step).

use std::sync::Arc;

use crate::autodiff::{kernels, NodeId, Tape, Tensor};
use crate::nn::{build_forward, Head, QNetworkSpec};
use crate::rl::RlError;

use crate::autodiff::ParamVector;

/// The C51 atom grid: z_i = V_MIN + i·Δz for 0 ≤ i < N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalSupport {
    pub n: usize,
    pub v_min: f32,
    pub v_max: f32,
}

impl CategoricalSupport {
    /// The paper's setting: 51 atoms on [−10, 10].
    pub fn c51() -> Self {
        CategoricalSupport { n: 51, v_min: -10.0, v_max: 10.0 }
    }

    pub fn delta_z(&self) -> f32 {
        (self.v_max - self.v_min) / (self.n - 1) as f32
    }

    pub fn atoms(&self) -> Vec<f32> {
        let dz = self.delta_z();
        (0..self.n).map(|i| self.v_min + i as f32 * dz).collect()
    }
}

/// y_j = r_j for terminals, else r_j + γ·max_a′ Q̂(s′_j, a′), with Q̂ the
/// frozen target parameters.
pub fn dqn_target(
    spec: &QNetworkSpec,
    target_params: &ParamVector,
    batch: &[crate::rl::Transition],
    gamma: f32,
) -> Result<Vec<f32>, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let num_actions = spec.head.num_actions();
    let mut next_obs = vec![0.0f32; batch.len() * spec.obs_len()];
    for (t, chunk) in batch.iter().zip(next_obs.chunks_exact_mut(spec.obs_len())) {
        t.next_obs.write_f32(chunk);
    }
    let q = crate::nn::forward_raw(spec, target_params, &next_obs, batch.len());
    let (maxes, _) = kernels::max_rows(&q, batch.len(), num_actions);
    Ok(batch
        .iter()
        .zip(maxes)
        .map(|(t, m)| if t.done { t.reward } else { t.reward + gamma * m })
        .collect())
}

/// Mean Huber loss over the batch: h(d) = ½d² on d² ≤ 1, |d| − ½ otherwise.
pub fn huber_loss(q_pred: &[f32], y: &[f32]) -> f32 {
    assert_eq!(q_pred.len(), y.len());
    let sum: f64 = q_pred.iter().zip(y).map(|(&q, &t)| kernels::huber(q - t) as f64).sum();
    (sum / q_pred.len() as f64) as f32
}

/// Distributes the shifted atom masses onto the fixed support: the Φ
/// projection of Alg. 2. `gamma_t` must be 0 at terminals. Conserves total
/// mass; clamping handles out-of-range targets.
pub fn categorical_project(
    support: &CategoricalSupport,
    r: f32,
    gamma_t: f32,
    p: &[f32],
) -> Result<Vec<f32>, RlError> {
    debug_assert_eq!(p.len(), support.n);
    debug_assert!((0.0..=1.0).contains(&gamma_t));
    let total: f32 = p.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(RlError::UnnormalizedTarget(total));
    }
    let dz = support.delta_z() as f64;
    let (v_min, v_max) = (support.v_min as f64, support.v_max as f64);
    let mut m = vec![0.0f64; support.n];
    for (j, &pj) in p.iter().enumerate() {
        let z = support.v_min as f64 + j as f64 * dz;
        let tz = (r as f64 + gamma_t as f64 * z).clamp(v_min, v_max);
        let b = (tz - v_min) / dz;
        let l = b.floor();
        let u = b.ceil();
        if l == u {
            // Integral b: the whole mass lands on one atom.
            m[l as usize] += pj as f64;
        } else {
            m[l as usize] += pj as f64 * (u - b);
            m[u as usize] += pj as f64 * (b - l);
        }
    }
    Ok(m.into_iter().map(|v| v as f32).collect())
}

/// Projected target masses for a batch: picks a* by the greedy rule on the
/// target network's Q̂(s′,a) = Σ_i z_i·p_i, then projects p(s′,a*) through
/// (r, γ_t) with γ_t = 0 at terminals. Output is row-major [batch, N].
pub fn c51_target_masses(
    spec: &QNetworkSpec,
    target_params: &ParamVector,
    support: &CategoricalSupport,
    batch: &[crate::rl::Transition],
    gamma: f32,
) -> Result<Vec<f32>, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let Head::C51 { num_actions, num_atoms } = spec.head else {
        panic!("c51_target_masses requires a C51 head");
    };
    debug_assert_eq!(num_atoms, support.n);
    let atoms = support.atoms();
    let mut next_obs = vec![0.0f32; batch.len() * spec.obs_len()];
    for (t, chunk) in batch.iter().zip(next_obs.chunks_exact_mut(spec.obs_len())) {
        t.next_obs.write_f32(chunk);
    }
    let logits = crate::nn::forward_raw(spec, target_params, &next_obs, batch.len());
    let probs = kernels::softmax_rows(&logits, batch.len() * num_actions, num_atoms);
    let mut masses = Vec::with_capacity(batch.len() * support.n);
    for (bi, t) in batch.iter().enumerate() {
        let rows = &probs[bi * num_actions * num_atoms..(bi + 1) * num_actions * num_atoms];
        let q: Vec<f32> = rows
            .chunks_exact(num_atoms)
            .map(|p| p.iter().zip(&atoms).map(|(&pi, &z)| pi * z).sum())
            .collect();
        let (_, best) = kernels::max_rows(&q, 1, num_actions);
        let p_star = &rows[best[0] as usize * num_atoms..(best[0] as usize + 1) * num_atoms];
        let gamma_t = if t.done { 0.0 } else { gamma };
        masses.extend(categorical_project(support, t.reward, gamma_t, p_star)?);
    }
    Ok(masses)
}

/// Mean cross-entropy −Σ_i m_i·log p_i with p = softmax(logits) per row;
/// stabilized by max subtraction (log p = logit − logsumexp).
pub fn c51_loss(logits: &[f32], masses: &[f32], n_atoms: usize) -> f32 {
    assert_eq!(logits.len(), masses.len());
    let rows = logits.len() / n_atoms;
    let lse = kernels::logsumexp_rows(logits, rows, n_atoms);
    let mut total = 0.0f64;
    for ((lrow, mrow), l) in
        logits.chunks_exact(n_atoms).zip(masses.chunks_exact(n_atoms)).zip(lse)
    {
        for (&li, &mi) in lrow.iter().zip(mrow) {
            if mi != 0.0 {
                total -= (mi as f64) * (li - l) as f64;
            }
        }
    }
    (total / rows as f64) as f32
}

/// Records the full DQN training loss on a tape: Huber(Q(s,a;θ) − y),
/// averaged over the batch. `targets` are constants (stop-gradient).
pub fn build_dqn_loss(
    tape: &mut Tape,
    spec: &QNetworkSpec,
    params: &[NodeId],
    obs: Tensor,
    actions: &[u8],
    targets: &[f32],
) -> Result<NodeId, crate::autodiff::AdError> {
    let batch = actions.len();
    let x = tape.leaf(obs);
    let q = build_forward(tape, spec, params, x)?;
    let idx = Arc::new(actions.iter().map(|&a| a as u32).collect::<Vec<u32>>());
    let qa = tape.gather_rows(q, idx, 1)?;
    let qa = tape.reshape(qa, vec![batch])?;
    let y = tape.leaf(Tensor::new(vec![batch], targets.to_vec()));
    let d = tape.sub(qa, y)?;
    let h = tape.huber(d);
    Ok(tape.mean_all(h))
}

/// Records the C51 loss: cross-entropy of projected target masses against
/// the online distribution for the taken action, averaged over the batch.
pub fn build_c51_loss(
    tape: &mut Tape,
    spec: &QNetworkSpec,
    params: &[NodeId],
    obs: Tensor,
    actions: &[u8],
    masses: &[f32],
) -> Result<NodeId, crate::autodiff::AdError> {
    let Head::C51 { num_atoms, .. } = spec.head else {
        panic!("build_c51_loss requires a C51 head");
    };
    let batch = actions.len();
    debug_assert_eq!(masses.len(), batch * num_atoms);
    let x = tape.leaf(obs);
    let out = build_forward(tape, spec, params, x)?;
    let idx = Arc::new(actions.iter().map(|&a| a as u32).collect::<Vec<u32>>());
    let logits = tape.gather_rows(out, idx, num_atoms)?;
    let m = tape.leaf(Tensor::new(vec![batch, num_atoms], masses.to_vec()));
    // −Σ m·log p = logsumexp(logits) − Σ m·logits, since Σ m = 1.
    let lse = tape.logsumexp(logits)?;
    let ml = tape.mul(m, logits)?;
    let dot = tape.row_sum(ml)?;
    let per_sample = tape.sub(lse, dot)?;
    Ok(tape.mean_all(per_sample))
}
