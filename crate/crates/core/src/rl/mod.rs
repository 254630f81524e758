//! PointReach control with SAC-lite and periodic neuron resets.
//!
//! Actor and both online critics are instrumented and resettable; target
//! critics only track their online nets. In reset-event logs the three nets
//! share one layer numbering: actor nodes first, then critic 1, then critic 2.

pub mod env;
pub mod replay;
pub mod sac;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{classify, ActivityAccumulator, LayerScores, Metric};
use crate::net::{ActivationKind, Model};
use crate::reset::{ResetEngine, ResetEvent, ResetPolicy};
use crate::rng::{streams, RngState};
use crate::zoo::ArchSpec;

pub use env::{PointReach, ACTION_DIM, EPISODE_LEN, STATE_DIM};
pub use replay::{Batch, ReplayBuffer};
pub use sac::{sac_update, Agent, SacConfig, UpdateInfo};

/// One trace row; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRow {
    pub step: u64,
    pub episodic_return: f64,
    pub inactive_ratio_grama: f64,
    pub inactive_ratio_redo: f64,
    pub resets_cum: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RlTrace {
    pub rows: Vec<RlRow>,
    pub events: Vec<ResetEvent>,
}

impl RlTrace {
    pub fn terminal_return(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.episodic_return)
    }

    /// Mean of a metric's inactive ratio over all rows.
    pub fn mean_inactive_ratio(&self, metric: Metric) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .rows
            .iter()
            .map(|r| match metric {
                Metric::Grama => r.inactive_ratio_grama,
                Metric::Redo => r.inactive_ratio_redo,
            })
            .sum();
        sum / self.rows.len() as f64
    }
}

/// Per-net accumulators for actor, critic 1, critic 2.
struct Taps([ActivityAccumulator; 3]);

impl Taps {
    fn new(agent: &Agent) -> Self {
        Taps([
            ActivityAccumulator::new(agent.actor.active_sites()),
            ActivityAccumulator::new(agent.critics[0].active_sites()),
            ActivityAccumulator::new(agent.critics[1].active_sites()),
        ])
    }

    fn add(&mut self, info: &UpdateInfo) -> Result<()> {
        if let Some(t) = &info.actor_taps {
            self.0[0].accumulate(t)?;
        }
        self.0[1].accumulate(&info.critic_taps[0])?;
        self.0[2].accumulate(&info.critic_taps[1])
    }

    /// Drains every net with data; `None` for nets without updates.
    fn drain(&mut self) -> Result<[Option<Vec<LayerScores>>; 3]> {
        let mut out: [Option<Vec<LayerScores>>; 3] = Default::default();
        for (o, acc) in out.iter_mut().zip(self.0.iter_mut()) {
            if acc.count() > 0 {
                *o = Some(acc.drain()?.scores());
            }
        }
        Ok(out)
    }
}

fn ratio(scores: &[Option<Vec<LayerScores>>; 3], metric: Metric) -> Result<f64> {
    let all: Vec<LayerScores> = scores.iter().flatten().flatten().cloned().collect();
    if all.is_empty() {
        return Ok(0.0);
    }
    Ok(classify(&all, metric.default_tau(), metric)?.ratio)
}

fn net_mut(agent: &mut Agent, k: usize) -> (&mut Model, &mut crate::optim::Adam) {
    match k {
        0 => (&mut agent.actor, &mut agent.actor_opt),
        j => (&mut agent.critics[j - 1], &mut agent.critic_opts[j - 1]),
    }
}

/// Full training loop. `activation` overrides the arch's activation kind.
pub fn run_rl(
    arch: &ArchSpec,
    policy: Option<&ResetPolicy>,
    activation: Option<ActivationKind>,
    seed: u64,
    cfg: &SacConfig,
) -> Result<RlTrace> {
    cfg.validate()?;
    if let Some(p) = policy {
        p.validate()?;
    }
    let mut spec = arch.clone();
    if let Some(kind) = activation {
        spec.activation = kind;
    }
    spec.validate_shape()?;
    let mut agent = Agent::new(
        &spec,
        STATE_DIM,
        ACTION_DIM,
        cfg.clone(),
        &RngState::new(seed, streams::INIT),
    )?;
    let mut env = PointReach::new(RngState::new(seed, streams::ENV));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, STATE_DIM, ACTION_DIM);
    let explore = RngState::new(seed, streams::POLICY);
    let mut act_rng = explore.derive(0);
    let mut update_rng = explore.derive(1);
    let mut replay_rng = RngState::new(seed, streams::REPLAY);
    let reset_rng = RngState::new(seed, streams::RESET);
    let mut engines: Option<Vec<ResetEngine>> = policy.map(|p| {
        (0..3)
            .map(|k| ResetEngine::new(p.clone(), reset_rng.derive(k)))
            .collect()
    });
    let offsets = [
        0,
        agent.actor.nodes().len(),
        agent.actor.nodes().len() + agent.critics[0].nodes().len(),
    ];

    let mut trace_taps = Taps::new(&agent);
    let mut check_taps = Taps::new(&agent);
    let mut trace = RlTrace::default();
    let mut state = env.reset();
    let mut episode_return = 0.0;
    let mut window_returns: Vec<f64> = Vec::new();
    let mut last_return = f64::NAN;

    for step in 1..=cfg.total_steps {
        let action = if step <= cfg.learning_starts {
            vec![act_rng.uniform(-1.0, 1.0), act_rng.uniform(-1.0, 1.0)]
        } else {
            agent.act(&state, &mut act_rng)?
        };
        let out = env.step(&action);
        buffer.push(&state, &action, out.reward, &out.state, out.done);
        episode_return += out.reward;
        state = out.state;
        if out.done {
            window_returns.push(episode_return);
            last_return = episode_return;
            episode_return = 0.0;
            state = env.reset();
        }
        if step >= cfg.learning_starts {
            let info = sac_update(&mut agent, &buffer, &mut replay_rng, &mut update_rng)?;
            trace_taps.add(&info)?;
            check_taps.add(&info)?;
        }
        if let (Some(engines), Some(p)) = (engines.as_mut(), policy) {
            if step % p.period == 0 {
                let scores = check_taps.drain()?;
                for (k, s) in scores.iter().enumerate() {
                    let Some(s) = s else { continue };
                    let (model, opt) = net_mut(&mut agent, k);
                    for mut ev in engines[k].apply(model, s, step, Some(opt))? {
                        ev.site.layer += offsets[k];
                        trace.events.push(ev);
                    }
                }
            }
        }
        if step % cfg.log_every == 0 {
            let scores = trace_taps.drain()?;
            let episodic_return = if window_returns.is_empty() {
                last_return
            } else {
                window_returns.iter().sum::<f64>() / window_returns.len() as f64
            };
            window_returns.clear();
            trace.rows.push(RlRow {
                step,
                episodic_return,
                inactive_ratio_grama: ratio(&scores, Metric::Grama)?,
                inactive_ratio_redo: ratio(&scores, Metric::Redo)?,
                resets_cum: trace.events.len() as u64,
                seed,
            });
        }
    }
    Ok(trace)
}
