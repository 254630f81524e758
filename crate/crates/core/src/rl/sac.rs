//! SAC with a fixed entropy weight, twin critics and Polyak targets.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::net::{Backward, Model, ParamGrads, TapRecord};
use crate::optim::Adam;
use crate::rl::replay::{Batch, ReplayBuffer};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::zoo::{build_actor_critic, ArchSpec};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    /// Polyak rate for the target critics.
    pub target_smoothing: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha: f64,
    pub policy_delay: u64,
    pub learning_starts: u64,
    pub total_steps: u64,
    pub buffer_capacity: usize,
    /// Steps between trace rows.
    pub log_every: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            target_smoothing: 0.005,
            batch_size: 64,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            alpha: 0.1,
            policy_delay: 2,
            learning_starts: 1000,
            total_steps: 100_000,
            buffer_capacity: 100_000,
            log_every: 1000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(PlabError::config(format!("task.{f}"), m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.target_smoothing > 0.0 && self.target_smoothing <= 1.0) {
            return bad("target_smoothing", "must lie in (0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("actor_lr", "learning rates must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be > 0");
        }
        if self.batch_size == 0 || self.policy_delay == 0 || self.learning_starts == 0 {
            return bad(
                "batch_size",
                "batch_size, policy_delay and learning_starts must be >= 1",
            );
        }
        if self.total_steps == 0 || self.buffer_capacity == 0 || self.log_every == 0 {
            return bad(
                "total_steps",
                "total_steps, buffer_capacity and log_every must be >= 1",
            );
        }
        Ok(())
    }
}

pub fn log_std_of(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of the squashed action `a = tanh(u)`, `u ~ N(mean, exp(log_std)^2)`.
pub fn squashed_log_density(a: f64, mean: f64, log_std: f64) -> f64 {
    let u = a.atanh();
    let z = (u - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln() - (1.0 - a * a).ln()
}

/// Reparameterized draws from the policy head, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Squashed {
    pub action: Tensor,
    pub log_prob: Vec<f64>,
    std: Vec<f64>,
    eps: Vec<f64>,
    raw_log_std: Vec<f64>,
}

/// `out` is `[batch, 2 * action_dim]` (means, then raw log-stds).
pub fn squash(out: &Tensor, eps: &Tensor) -> Squashed {
    let (b, ad) = (out.rows(), out.cols() / 2);
    let mut action = Vec::with_capacity(b * ad);
    let mut log_prob = vec![0.0; b];
    let mut std = Vec::with_capacity(b * ad);
    let mut raw_log_std = Vec::with_capacity(b * ad);
    for r in 0..b {
        let row = out.row(r);
        for k in 0..ad {
            let e = eps.get2(r, k);
            let ls = log_std_of(row[ad + k]);
            let sd = ls.exp();
            let u = row[k] + sd * e;
            action.push(u.tanh());
            log_prob[r] += -0.5 * e * e - ls - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(u);
            std.push(sd);
            raw_log_std.push(row[ad + k]);
        }
    }
    Squashed {
        action: Tensor::from_vec(&[b, ad], action).expect("shape matches data"),
        log_prob,
        std,
        eps: eps.data().to_vec(),
        raw_log_std,
    }
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches data")
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, wa, wb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(n * (wa + wb));
    for r in 0..n {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::from_vec(&[n, wa + wb], data).expect("shape matches data")
}

/// Mean squared TD error of `critic` against fixed targets, with gradients and taps.
pub fn critic_loss_grad(
    critic: &mut Model,
    input: &Tensor,
    target: &[f64],
) -> Result<(f64, ParamGrads, Vec<TapRecord>)> {
    let q = critic.forward(input)?;
    let n = target.len() as f64;
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(target.len());
    for (qv, y) in q.data().iter().zip(target) {
        let d = qv - y;
        loss += d * d / n;
        g.push(2.0 * d / n);
    }
    let bw = critic.backward(&Tensor::from_vec(&[target.len(), 1], g)?)?;
    Ok((loss, bw.grads, bw.taps))
}

#[derive(Debug, Clone)]
pub struct UpdateInfo {
    pub critic_loss: [f64; 2],
    pub actor_loss: Option<f64>,
    /// TD targets of the critic update.
    pub target: Vec<f64>,
    pub critic_taps: [Vec<TapRecord>; 2],
    pub actor_taps: Option<Vec<TapRecord>>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: Model,
    pub critics: [Model; 2],
    pub targets: [Model; 2],
    pub actor_opt: Adam,
    pub critic_opts: [Adam; 2],
    pub cfg: SacConfig,
    updates: u64,
}

impl Agent {
    pub fn new(
        spec: &ArchSpec,
        state_dim: usize,
        action_dim: usize,
        cfg: SacConfig,
        rng: &RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        let ac = build_actor_critic(state_dim, action_dim, spec, rng)?;
        let targets = ac.critics.clone();
        Ok(Agent {
            actor: ac.actor,
            critics: ac.critics,
            targets,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opts: [Adam::new(cfg.critic_lr), Adam::new(cfg.critic_lr)],
            cfg,
            updates: 0,
        })
    }

    pub fn from_parts(actor: Model, critics: [Model; 2], cfg: SacConfig) -> Self {
        Agent {
            actor,
            targets: critics.clone(),
            critics,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opts: [Adam::new(cfg.critic_lr), Adam::new(cfg.critic_lr)],
            cfg,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim() / 2
    }

    /// Stochastic action for one state.
    pub fn act(&self, state: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
        let out = self
            .actor
            .predict(&Tensor::from_vec(&[1, state.len()], state.to_vec())?)?;
        let eps = normal_tensor(1, self.action_dim(), rng);
        Ok(squash(&out, &eps).action.into_data())
    }

    /// `r + gamma * (1 - done) * (min target Q(s', a') - alpha * log pi(a'|s'))`.
    pub fn td_target(&self, batch: &Batch, rng: &mut RngState) -> Result<Vec<f64>> {
        let out = self.actor.predict(&batch.next_states)?;
        let eps = normal_tensor(out.rows(), self.action_dim(), rng);
        let next = squash(&out, &eps);
        let input = concat_cols(&batch.next_states, &next.action);
        let q1 = self.targets[0].predict(&input)?;
        let q2 = self.targets[1].predict(&input)?;
        let c = &self.cfg;
        Ok((0..batch.rewards.len())
            .map(|b| {
                if batch.dones[b] {
                    batch.rewards[b]
                } else {
                    let soft = q1.data()[b].min(q2.data()[b]) - c.alpha * next.log_prob[b];
                    batch.rewards[b] + c.gamma * soft
                }
            })
            .collect())
    }

    /// One gradient step on both critics, a delayed actor step, then Polyak targets.
    pub fn update(&mut self, batch: &Batch, rng: &mut RngState) -> Result<UpdateInfo> {
        if batch.rewards.len() != self.cfg.batch_size {
            return Err(PlabError::InvalidShape(format!(
                "batch of {} where {} was configured",
                batch.rewards.len(),
                self.cfg.batch_size
            )));
        }
        let target = self.td_target(batch, rng)?;
        let input = concat_cols(&batch.states, &batch.actions);
        let mut critic_loss = [0.0; 2];
        let mut critic_taps: [Vec<TapRecord>; 2] = Default::default();
        for j in 0..2 {
            let (loss, grads, taps) = critic_loss_grad(&mut self.critics[j], &input, &target)?;
            self.critic_opts[j].step(&mut self.critics[j], &grads);
            critic_loss[j] = loss;
            critic_taps[j] = taps;
        }
        self.updates += 1;
        let (actor_loss, actor_taps) = if self.updates.is_multiple_of(self.cfg.policy_delay) {
            let (l, t) = self.actor_step(&batch.states, rng)?;
            (Some(l), Some(t))
        } else {
            (None, None)
        };
        for j in 0..2 {
            self.targets[j].soft_update_from(&self.critics[j], self.cfg.target_smoothing)?;
        }
        Ok(UpdateInfo {
            critic_loss,
            actor_loss,
            target,
            critic_taps,
            actor_taps,
        })
    }

    fn actor_step(&mut self, states: &Tensor, rng: &mut RngState) -> Result<(f64, Vec<TapRecord>)> {
        let eps = normal_tensor(states.rows(), self.action_dim(), rng);
        let (loss, bw) = self.actor_grad(states, &eps)?;
        self.actor_opt.step(&mut self.actor, &bw.grads);
        Ok((loss, bw.taps))
    }

    /// Actor loss `mean(alpha * log pi - min Q)` and its backward pass for fixed noise.
    pub fn actor_grad(&self, states: &Tensor, eps: &Tensor) -> Result<(f64, Backward)> {
        let cache = self.actor.forward_pass(states, &[])?;
        let out = cache.value(self.actor.output_node());
        let (n, ad) = (out.rows(), self.action_dim());
        let sq = squash(out, eps);
        let input = concat_cols(states, &sq.action);
        let caches = [
            self.critics[0].forward_pass(&input, &[])?,
            self.critics[1].forward_pass(&input, &[])?,
        ];
        let q: Vec<[f64; 2]> = (0..n)
            .map(|b| {
                [
                    caches[0].value(self.critics[0].output_node()).data()[b],
                    caches[1].value(self.critics[1].output_node()).data()[b],
                ]
            })
            .collect();
        // d min(Q1, Q2) / d action, routed through the smaller critic per sample.
        let mut dq_da = vec![0.0; n * ad];
        for j in 0..2 {
            let mask: Vec<f64> = q
                .iter()
                .map(|qb| {
                    if (qb[1] < qb[0]) == (j == 1) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let input_grad =
                self.critics[j].input_grad_from(&caches[j], &Tensor::from_vec(&[n, 1], mask)?)?;
            let sd = states.cols();
            for b in 0..n {
                for k in 0..ad {
                    dq_da[b * ad + k] += input_grad.get2(b, sd + k);
                }
            }
        }
        let alpha = self.cfg.alpha;
        let inv_n = 1.0 / n as f64;
        let mut grad = Tensor::zeros(&[n, 2 * ad])?;
        let mut loss = 0.0;
        for b in 0..n {
            loss += (alpha * sq.log_prob[b] - q[b][0].min(q[b][1])) * inv_n;
            let g = grad.row_mut(b);
            for k in 0..ad {
                let i = b * ad + k;
                let a = sq.action.data()[i];
                let jac = 1.0 - a * a;
                let se = sq.std[i] * sq.eps[i];
                let d_mean = alpha * 2.0 * a - dq_da[i] * jac;
                let d_ls = alpha * (-1.0 + 2.0 * a * se) - dq_da[i] * jac * se;
                let t = sq.raw_log_std[i].tanh();
                let dls_draw = 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t);
                g[k] = d_mean * inv_n;
                g[ad + k] = d_ls * dls_draw * inv_n;
            }
        }
        Ok((loss, self.actor.backward_from(&cache, &grad)?))
    }
}

/// Samples a batch and runs one update.
pub fn sac_update(
    agent: &mut Agent,
    buffer: &ReplayBuffer,
    replay_rng: &mut RngState,
    noise_rng: &mut RngState,
) -> Result<UpdateInfo> {
    if buffer.is_empty() {
        return Err(PlabError::NotStarted("no transitions collected yet".into()));
    }
    let batch = buffer.sample(agent.cfg.batch_size, replay_rng)?;
    agent.update(&batch, noise_rng)
}
