//! Seeded fixed-capacity uniform reservoir (Algorithm R) with a
//! deterministic merge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PtqError, Result};
use crate::tensor::percentile_of_sorted;

pub const DEFAULT_CAPACITY: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    seen: u64,
    samples: Vec<f32>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            samples: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// True while every offered value is still held.
    pub fn is_exact(&self) -> bool {
        self.seen == self.samples.len() as u64
    }

    pub fn offer(&mut self, v: f32) {
        self.seen += 1;
        if self.samples.len() < self.capacity {
            self.samples.push(v);
        } else if self.capacity > 0 {
            let j = self.rng.random_range(0..self.seen);
            if j < self.capacity as u64 {
                self.samples[j as usize] = v;
            }
        }
    }

    pub fn extend(&mut self, values: impl IntoIterator<Item = f32>) {
        for v in values {
            self.offer(v);
        }
    }

    /// Folds `other` into `self`. The result depends on merge order and on
    /// `self`'s generator state, so callers merging partial reservoirs must
    /// do so in a fixed order.
    pub fn merge(&mut self, other: &Reservoir) {
        let total = self.seen + other.seen;
        if self.samples.len() + other.samples.len() <= self.capacity {
            self.samples.extend_from_slice(&other.samples);
            self.seen = total;
            return;
        }
        let target = self.capacity.min(total as usize);
        // Draw how many slots each side fills, proportional to how many
        // values each side has seen (sequential hypergeometric draw).
        let (mut rem_a, mut rem_b) = (self.seen, other.seen);
        let (mut take_a, mut take_b) = (0usize, 0usize);
        for _ in 0..target {
            let pick_a = if take_a == self.samples.len() {
                false
            } else if take_b == other.samples.len() {
                true
            } else {
                self.rng.random_range(0..rem_a + rem_b) < rem_a
            };
            if pick_a {
                take_a += 1;
                rem_a = rem_a.saturating_sub(1);
            } else {
                take_b += 1;
                rem_b = rem_b.saturating_sub(1);
            }
        }
        let mut merged = choose(&mut self.rng, &self.samples, take_a);
        merged.extend(choose(&mut self.rng, &other.samples, take_b));
        self.samples = merged;
        self.seen = total;
    }

    /// Percentile of the held samples.
    pub fn percentile(&self, k: f64) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(PtqError::Degenerate(
                "reservoir is empty; percentile unavailable".into(),
            ));
        }
        let mut sorted = self.samples.clone();
        sorted.sort_unstable_by(f32::total_cmp);
        percentile_of_sorted(&sorted, k)
    }
}

/// `n` distinct elements of `values`, uniformly at random, in source order.
fn choose(rng: &mut ChaCha8Rng, values: &[f32], n: usize) -> Vec<f32> {
    if n >= values.len() {
        return values.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, values.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| values[i]).collect()
}
