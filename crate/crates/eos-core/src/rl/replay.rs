//! FIFO replay ring with uniform, seeded sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::PackedObs;

/// One (s, a, r, s′, done) record. `done` is true only for genuine
/// terminals; truncated episodes store false so bootstrapping continues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: PackedObs,
    pub action: u8,
    pub reward: f32,
    pub next_obs: PackedObs,
    pub done: bool,
    /// Whether the behaviour policy took its random branch for this action.
    pub was_random: bool,
}

/// Ring buffer of transitions. Once full, inserting evicts the oldest;
/// iteration order is insertion order.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    /// Next write position once the ring is full.
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { storage: Vec::new(), capacity, head: 0, inserted: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// i-th transition in insertion order (0 = oldest surviving).
    pub fn get(&self, i: usize) -> &Transition {
        debug_assert!(i < self.storage.len());
        if self.storage.len() < self.capacity {
            &self.storage[i]
        } else {
            &self.storage[(self.head + i) % self.capacity]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Uniform sample with replacement; deterministic per RNG state.
    pub fn sample_indices(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.len())).collect()
    }
}
