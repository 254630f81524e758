//! Adam with per-entry moment access, so resets can clear the moments of
//! exactly the parameters they touch.
//!
//! Update per entry, with step count `t` and gradient `g`:
//! `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`,
//! `p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)`.
//! Frozen entries (see `Model::freeze`) are never updated.

use std::collections::BTreeMap;

use crate::net::{Model, ParamGrads, ParamId};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.ids.iter().zip(&grads.values) {
            let mask = model.frozen_mask(*id).map(<[bool]>::to_vec);
            let Some(p) = model.param_mut(*id) else {
                continue;
            };
            let m = self.first.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            for (k, ((pk, gk), (mk, vk))) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .enumerate()
            {
                if mask.as_ref().is_some_and(|mask| mask[k]) {
                    continue;
                }
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                *pk -= self.lr * (*mk / bc1) / ((*vk / bc2).sqrt() + self.eps);
            }
        }
    }

    /// Zeroes both moments of one parameter entry.
    pub fn zero_moments(&mut self, id: ParamId, index: usize) {
        if let Some(m) = self.first.get_mut(&id) {
            m[index] = 0.0;
        }
        if let Some(v) = self.second.get_mut(&id) {
            v[index] = 0.0;
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        Some((
            self.first.get(&id)?.as_slice(),
            self.second.get(&id)?.as_slice(),
        ))
    }
}
