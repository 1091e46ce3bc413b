use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fixed-capacity ring buffer of transitions stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_obs: Vec<f64>,
    terminals: Vec<bool>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Self {
        ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_obs: vec![0.0; capacity * obs_dim],
            terminals: vec![false; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
        let i = self.head;
        let (d, a) = (self.obs_dim, self.action_dim);
        self.obs[i * d..(i + 1) * d].copy_from_slice(obs);
        self.actions[i * a..(i + 1) * a].copy_from_slice(action);
        self.rewards[i] = reward;
        self.next_obs[i * d..(i + 1) * d].copy_from_slice(next_obs);
        self.terminals[i] = terminal;
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len)).collect()
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn next_obs(&self, i: usize) -> &[f64] {
        &self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn terminal(&self, i: usize) -> bool {
        self.terminals[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(2, 1, 1);
        b.push(&[1.0], &[0.0], 1.0, &[2.0], false);
        b.push(&[2.0], &[1.0], 2.0, &[3.0], false);
        b.push(&[3.0], &[2.0], 3.0, &[4.0], true);
        assert_eq!(b.len(), 2);
        assert_eq!(b.obs(0), &[3.0]);
        assert!(b.terminal(0));
        assert_eq!(b.reward(1), 2.0);
    }
}
