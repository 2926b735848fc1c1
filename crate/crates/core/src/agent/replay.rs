use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Twin,
}

/// One joint transition. Per-agent vectors are concatenated in agent order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceTuple {
    pub joint_obs: Vec<f64>,
    /// Relaxed categorical vectors, `n_agents * act_dim`.
    pub joint_action: Vec<f64>,
    pub rewards: Vec<f64>,
    pub joint_next_obs: Vec<f64>,
    pub done: bool,
    pub provenance: Provenance,
    /// Loss weight; adversarial-scenario tuples carry the emphasis factor.
    pub weight: f64,
}

impl ExperienceTuple {
    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }
}

/// Bounded ring buffer with uniform sampling.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    items: Vec<ExperienceTuple>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            items: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, t: ExperienceTuple) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn extend(&mut self, it: impl IntoIterator<Item = ExperienceTuple>) {
        for t in it {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &ExperienceTuple {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperienceTuple> {
        self.items.iter()
    }

    /// Uniform indices, with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&ExperienceTuple> {
        self.sample_indices(n, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}
