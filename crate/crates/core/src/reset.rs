//! Neuron resets and pruning.
//!
//! A post-activation unit is reset by redrawing its incoming parameters and
//! zeroing every weight that reads it. A layernorm feature is reset to
//! gain 1, shift 0. Optimizer moments of every touched entry are cleared.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::metrics::{classify, site_scores, LayerScores, Metric};
use crate::net::{Incoming, Model, NeuronSite, NodeId, Op, ParamId, ParamKind, SiteKind};
use crate::optim::Adam;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PolicySpec")]
pub struct ResetPolicy {
    pub metric: Metric,
    pub tau: f64,
    /// Steps between checks.
    pub period: u64,
    /// Cap on resets per check as a fraction of all scored sites; 1.0 = no cap.
    pub max_reset_fraction: f64,
    /// A site reset at step `t` is exempt at any check `t' <= t + grace`.
    pub grace: u64,
    pub include_layernorm: bool,
    /// Set the incoming bias of a reset unit to zero.
    pub reset_bias: bool,
}

/// Wire form: every field but `metric` falls back to the metric's default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySpec {
    #[serde(default)]
    metric: Metric,
    tau: Option<f64>,
    period: Option<u64>,
    max_reset_fraction: Option<f64>,
    grace: Option<u64>,
    include_layernorm: Option<bool>,
    reset_bias: Option<bool>,
}

impl From<PolicySpec> for ResetPolicy {
    fn from(s: PolicySpec) -> Self {
        let d = ResetPolicy::new(s.metric);
        ResetPolicy {
            metric: s.metric,
            tau: s.tau.unwrap_or(d.tau),
            period: s.period.unwrap_or(d.period),
            max_reset_fraction: s.max_reset_fraction.unwrap_or(d.max_reset_fraction),
            grace: s.grace.unwrap_or(d.grace),
            include_layernorm: s.include_layernorm.unwrap_or(d.include_layernorm),
            reset_bias: s.reset_bias.unwrap_or(d.reset_bias),
        }
    }
}

impl ResetPolicy {
    pub fn new(metric: Metric) -> Self {
        ResetPolicy {
            metric,
            tau: metric.default_tau(),
            period: 1000,
            max_reset_fraction: 1.0,
            grace: 1000,
            include_layernorm: metric == Metric::Grama,
            reset_bias: true,
        }
    }

    pub fn grama() -> Self {
        Self::new(Metric::Grama)
    }

    pub fn redo() -> Self {
        Self::new(Metric::Redo)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(PlabError::config(
                "policy.tau",
                format!("must be >= 0, got {}", self.tau),
            ));
        }
        if self.period == 0 {
            return Err(PlabError::config("policy.period", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_reset_fraction) {
            return Err(PlabError::config(
                "policy.max_reset_fraction",
                format!("must lie in [0, 1], got {}", self.max_reset_fraction),
            ));
        }
        Ok(())
    }
}

/// One reset decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetEvent {
    pub step: u64,
    pub site: NeuronSite,
    pub metric: Metric,
    pub value: f64,
    pub tau: f64,
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    step: u64,
    layer: usize,
    unit: usize,
    site_kind: SiteKind,
    metric: Metric,
    value: f64,
    tau: f64,
}

impl Serialize for ResetEvent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EventLine {
            step: self.step,
            layer: self.site.layer,
            unit: self.site.unit,
            site_kind: self.site.kind,
            metric: self.metric,
            value: self.value,
            tau: self.tau,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResetEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let l = EventLine::deserialize(d)?;
        Ok(ResetEvent {
            step: l.step,
            site: NeuronSite {
                layer: l.layer,
                unit: l.unit,
                kind: l.site_kind,
            },
            metric: l.metric,
            value: l.value,
            tau: l.tau,
        })
    }
}

fn param(node: NodeId, kind: ParamKind) -> ParamId {
    ParamId { node, kind }
}

/// Parameter entries whose value the unit's output depends on only through
/// that unit, plus the entries of downstream weights that read it.
struct Footprint {
    incoming: Vec<(ParamId, usize)>,
    outgoing: Vec<(ParamId, usize)>,
}

fn footprint(model: &Model, site: &NeuronSite) -> Result<Footprint> {
    if !model.has_site(site) {
        return Err(PlabError::NotFound(format!("site {site}")));
    }
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    match site.kind {
        SiteKind::PostActivation => {
            match model.incoming(site.layer) {
                Incoming::LinearRow(l) => {
                    let fan_in = model.param(param(l, ParamKind::Weight)).unwrap().cols();
                    for k in 0..fan_in {
                        incoming.push((param(l, ParamKind::Weight), site.unit * fan_in + k));
                    }
                    incoming.push((param(l, ParamKind::Bias), site.unit));
                }
                Incoming::LayerNormFeature(n) => {
                    incoming.push((param(n, ParamKind::Gain), site.unit));
                    incoming.push((param(n, ParamKind::Shift), site.unit));
                }
                Incoming::None => {}
            }
            outgoing_columns(
                model,
                model.linear_readers(site.layer, site.unit),
                &mut outgoing,
            );
        }
        SiteKind::LayernormFeature => {
            incoming.push((param(site.layer, ParamKind::Gain), site.unit));
            incoming.push((param(site.layer, ParamKind::Shift), site.unit));
            // Readers of the feature itself and of the activation applied to it.
            let mut readers = model.linear_readers(site.layer, site.unit);
            for c in model.consumers(site.layer) {
                if matches!(model.nodes()[c].op, Op::Activation { .. }) {
                    readers.extend(model.linear_readers(c, site.unit));
                }
            }
            readers.sort_unstable();
            readers.dedup();
            outgoing_columns(model, readers, &mut outgoing);
        }
    }
    Ok(Footprint { incoming, outgoing })
}

fn outgoing_columns(model: &Model, readers: Vec<(NodeId, usize)>, out: &mut Vec<(ParamId, usize)>) {
    for (reader, col) in readers {
        let w = param(reader, ParamKind::Weight);
        let t = model.param(w).unwrap();
        let cols = t.cols();
        for r in 0..t.rows() {
            out.push((w, r * cols + col));
        }
    }
}

/// Resets one site in place. Returns the parameter entries that changed.
pub fn reset_neuron(
    model: &mut Model,
    site: &NeuronSite,
    rng: &mut RngState,
    reset_bias: bool,
    opt: Option<&mut Adam>,
) -> Result<Vec<(ParamId, usize)>> {
    let fp = footprint(model, site)?;
    let mut touched = Vec::new();
    for &(id, k) in &fp.incoming {
        let node = &model.nodes()[id.node];
        let value = match (&node.op, id.kind) {
            (Op::Linear(l), ParamKind::Weight) => l.weight_init.draw(rng),
            (Op::Linear(_), ParamKind::Bias) => {
                if !reset_bias {
                    continue;
                }
                0.0
            }
            (Op::LayerNorm(_), ParamKind::Gain) => 1.0,
            (Op::LayerNorm(_), ParamKind::Shift) => 0.0,
            _ => unreachable!("footprint only lists linear and layernorm parameters"),
        };
        model.param_mut(id).unwrap().data_mut()[k] = value;
        touched.push((id, k));
    }
    for &(id, k) in &fp.outgoing {
        model.param_mut(id).unwrap().data_mut()[k] = 0.0;
        touched.push((id, k));
    }
    if let Some(opt) = opt {
        for &(id, k) in &touched {
            opt.zero_moments(id, k);
        }
    }
    Ok(touched)
}

/// Last reset step per site.
pub type GraceTable = HashMap<NeuronSite, u64>;

/// Runs one policy check: classify, drop sites still in their grace window,
/// cap the count (lowest scores first, ties by site order), reset the rest.
pub fn apply_policy(
    model: &mut Model,
    scores: &[LayerScores],
    policy: &ResetPolicy,
    step: u64,
    rng: &mut RngState,
    grace: &mut GraceTable,
    mut opt: Option<&mut Adam>,
) -> Result<Vec<ResetEvent>> {
    let considered: Vec<LayerScores> = scores
        .iter()
        .filter(|l| {
            policy.include_layernorm
                || l.sites
                    .first()
                    .is_some_and(|s| s.kind != SiteKind::LayernormFeature)
        })
        .cloned()
        .collect();
    let total: usize = scores.iter().map(|l| l.sites.len()).sum();
    let flagged = classify(&considered, policy.tau, policy.metric)?;
    let value_of: HashMap<NeuronSite, f64> = site_scores(&considered, policy.metric)
        .into_iter()
        .collect();
    let mut candidates: Vec<(NeuronSite, f64)> = flagged
        .inactive
        .into_iter()
        .filter(|s| {
            grace
                .get(s)
                .is_none_or(|&last| step.saturating_sub(last) > policy.grace)
        })
        .map(|s| (s, value_of[&s]))
        .collect();
    if policy.max_reset_fraction < 1.0 {
        let cap = (policy.max_reset_fraction * total as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize;
        if candidates.len() > cap {
            candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            candidates.truncate(cap);
            candidates.sort_by_key(|a| a.0);
        }
    }
    let mut events = Vec::with_capacity(candidates.len());
    for (site, value) in candidates {
        reset_neuron(model, &site, rng, policy.reset_bias, opt.as_deref_mut())?;
        grace.insert(site, step);
        events.push(ResetEvent {
            step,
            site,
            metric: policy.metric,
            value,
            tau: policy.tau,
        });
    }
    Ok(events)
}

/// A policy together with its grace table and reset stream.
#[derive(Debug, Clone)]
pub struct ResetEngine {
    pub policy: ResetPolicy,
    grace: GraceTable,
    rng: RngState,
    total_resets: u64,
}

impl ResetEngine {
    pub fn new(policy: ResetPolicy, rng: RngState) -> Self {
        ResetEngine {
            policy,
            grace: GraceTable::new(),
            rng,
            total_resets: 0,
        }
    }

    pub fn is_due(&self, step: u64) -> bool {
        step > 0 && step.is_multiple_of(self.policy.period)
    }

    pub fn total_resets(&self) -> u64 {
        self.total_resets
    }

    pub fn apply(
        &mut self,
        model: &mut Model,
        scores: &[LayerScores],
        step: u64,
        opt: Option<&mut Adam>,
    ) -> Result<Vec<ResetEvent>> {
        let ev = apply_policy(
            model,
            scores,
            &self.policy,
            step,
            &mut self.rng,
            &mut self.grace,
            opt,
        )?;
        self.total_resets += ev.len() as u64;
        Ok(ev)
    }
}

/// Zeroes and freezes every weight reading each site, freezes its incoming
/// parameters, and removes it from metric accumulation. Layernorm features
/// are pinned to gain 0, shift 0.
pub fn prune_sites(
    model: &mut Model,
    sites: &[NeuronSite],
    mut opt: Option<&mut Adam>,
) -> Result<()> {
    for site in sites {
        footprint(model, site)?;
    }
    for site in sites {
        let fp = footprint(model, site)?;
        let zeroed: Vec<(ParamId, usize)> = match site.kind {
            SiteKind::PostActivation => fp.outgoing.clone(),
            SiteKind::LayernormFeature => fp.incoming.iter().chain(&fp.outgoing).copied().collect(),
        };
        for &(id, k) in &zeroed {
            model.param_mut(id).unwrap().data_mut()[k] = 0.0;
        }
        for &(id, k) in fp.incoming.iter().chain(&fp.outgoing) {
            model.freeze(id, k);
            if let Some(opt) = opt.as_deref_mut() {
                opt.zero_moments(id, k);
            }
        }
        model.pruned.insert(*site);
    }
    Ok(())
}
