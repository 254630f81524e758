use crate::error::{PlabError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Fixed-capacity FIFO of transitions, stored flat.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    cursor: usize,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            states: vec![0.0; capacity * state_dim],
            actions: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_states: vec![0.0; capacity * state_dim],
            dones: vec![false; capacity],
            cursor: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Next slot to be written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], r: f64, s2: &[f64], done: bool) {
        let i = self.cursor;
        let (sd, ad) = (self.state_dim, self.action_dim);
        self.states[i * sd..(i + 1) * sd].copy_from_slice(s);
        self.actions[i * ad..(i + 1) * ad].copy_from_slice(a);
        self.rewards[i] = r;
        self.next_states[i * sd..(i + 1) * sd].copy_from_slice(s2);
        self.dones[i] = done;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    pub fn reward(&self, slot: usize) -> f64 {
        self.rewards[slot]
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut RngState) -> Result<Batch> {
        if self.len == 0 {
            return Err(PlabError::NotStarted("replay buffer is empty".into()));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.len)).collect();
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let pick = |src: &[f64], w: usize| -> Tensor {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            Tensor::from_vec(&[idx.len(), w], out).expect("shape matches data")
        };
        Batch {
            states: pick(&self.states, sd),
            actions: pick(&self.actions, ad),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: pick(&self.next_states, sd),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_overwrite() {
        let mut b = ReplayBuffer::new(3, 1, 1);
        for k in 0..5 {
            b.push(&[k as f64], &[0.0], k as f64, &[0.0], false);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.cursor(), 2);
        assert_eq!((b.reward(0), b.reward(1), b.reward(2)), (3.0, 4.0, 2.0));
    }

    #[test]
    fn empty_sample_not_started() {
        let b = ReplayBuffer::new(3, 1, 1);
        assert!(matches!(
            b.sample(2, &mut RngState::new(0, 8)),
            Err(PlabError::NotStarted(_))
        ));
    }

    #[test]
    fn sample_shapes_and_determinism() {
        let mut b = ReplayBuffer::new(10, 2, 1);
        for k in 0..6 {
            b.push(
                &[k as f64, 0.0],
                &[1.0],
                -(k as f64),
                &[0.0, k as f64],
                k == 5,
            );
        }
        let x = b.sample(4, &mut RngState::new(1, 8)).unwrap();
        let y = b.sample(4, &mut RngState::new(1, 8)).unwrap();
        assert_eq!(x.states.shape(), &[4, 2]);
        assert_eq!(x.rewards, y.rewards);
        for r in 0..4 {
            assert_eq!(x.states.get2(r, 0), -x.rewards[r]);
        }
    }
}
