//! Behaviour policies over action-value vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Argmax with ties broken toward the lowest action index.
pub fn greedy_action(q: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// With probability ε a uniform random action, otherwise the greedy one.
/// Returns (action, took_random_branch); deterministic per RNG state.
pub fn epsilon_greedy(q: &[f32], eps: f32, rng: &mut ChaCha8Rng) -> (usize, bool) {
    debug_assert!((0.0..=1.0).contains(&eps));
    if eps > 0.0 && rng.gen::<f64>() < eps as f64 {
        (rng.gen_range(0..q.len()), true)
    } else {
        (greedy_action(q), false)
    }
}
