//! Per-neuron activity statistics and the two normalized scores built on them.
//!
//! For a layer with `H` active units the activation score of unit `i` is
//! `S_i = a_i / mean_k(a_k)` with `a_i` the window mean of `|h_i|`; the
//! gradient score is `G_i = g_i / mean_k(g_k)` with `g_i` the window mean of
//! the per-sample gradient magnitude at the unit. A layer whose mean statistic
//! is exactly zero scores 0 everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::net::{NeuronSite, NodeId, TapRecord};

/// Which statistic decides inactivity.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Normalized mean `|activation|`.
    Redo,
    /// Normalized mean `|gradient|`.
    #[default]
    Grama,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Redo => "redo",
            Metric::Grama => "grama",
        }
    }

    pub fn default_tau(self) -> f64 {
        match self {
            Metric::Redo => 0.02,
            Metric::Grama => 0.01,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = PlabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "redo" => Ok(Metric::Redo),
            "grama" => Ok(Metric::Grama),
            other => Err(PlabError::config(
                "metric",
                format!("unknown metric `{other}`"),
            )),
        }
    }
}

/// Window means of the two tap statistics, one entry per site.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub sites: Vec<NeuronSite>,
    pub mean_activation: Vec<f64>,
    pub mean_gradient: Vec<f64>,
    pub steps: u64,
}

impl Window {
    pub fn scores(&self) -> Vec<LayerScores> {
        compute_scores(self)
    }

    /// The same window with `removed` sites dropped.
    pub fn without(&self, removed: &BTreeSet<NeuronSite>) -> Window {
        let keep: Vec<usize> = (0..self.sites.len())
            .filter(|&k| !removed.contains(&self.sites[k]))
            .collect();
        Window {
            sites: keep.iter().map(|&k| self.sites[k]).collect(),
            mean_activation: keep.iter().map(|&k| self.mean_activation[k]).collect(),
            mean_gradient: keep.iter().map(|&k| self.mean_gradient[k]).collect(),
            steps: self.steps,
        }
    }
}

/// Running sums of tap records since the last drain.
#[derive(Debug, Clone)]
pub struct ActivityAccumulator {
    sites: Vec<NeuronSite>,
    sum_activation: Vec<f64>,
    sum_gradient: Vec<f64>,
    count: u64,
}

impl ActivityAccumulator {
    pub fn new(sites: Vec<NeuronSite>) -> Self {
        let n = sites.len();
        ActivityAccumulator {
            sites,
            sum_activation: vec![0.0; n],
            sum_gradient: vec![0.0; n],
            count: 0,
        }
    }

    pub fn sites(&self) -> &[NeuronSite] {
        &self.sites
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sums(&self) -> (&[f64], &[f64]) {
        (&self.sum_activation, &self.sum_gradient)
    }

    /// Replaces the tracked site set (after pruning) and clears the window.
    pub fn retarget(&mut self, sites: Vec<NeuronSite>) {
        *self = ActivityAccumulator::new(sites);
    }

    /// Stops tracking `removed` sites, keeping the sums of the rest.
    pub fn remove_sites(&mut self, removed: &BTreeSet<NeuronSite>) {
        let keep: Vec<usize> = (0..self.sites.len())
            .filter(|&k| !removed.contains(&self.sites[k]))
            .collect();
        self.sites = keep.iter().map(|&k| self.sites[k]).collect();
        self.sum_activation = keep.iter().map(|&k| self.sum_activation[k]).collect();
        self.sum_gradient = keep.iter().map(|&k| self.sum_gradient[k]).collect();
    }

    /// Adds one step's taps. `taps` must cover exactly the tracked sites, in order.
    pub fn accumulate(&mut self, taps: &[TapRecord]) -> Result<()> {
        if taps.len() != self.sites.len() {
            return Err(PlabError::InconsistentSites(format!(
                "expected {} taps, got {}",
                self.sites.len(),
                taps.len()
            )));
        }
        if let Some((t, s)) = taps.iter().zip(&self.sites).find(|(t, s)| t.site != **s) {
            return Err(PlabError::InconsistentSites(format!(
                "tap for {} where {} was expected",
                t.site, s
            )));
        }
        for (k, t) in taps.iter().enumerate() {
            self.sum_activation[k] += t.activation;
            self.sum_gradient[k] += t.gradient;
        }
        self.count += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Window> {
        if self.count == 0 {
            return Err(PlabError::EmptyWindow);
        }
        let c = self.count as f64;
        Ok(Window {
            sites: self.sites.clone(),
            mean_activation: self.sum_activation.iter().map(|s| s / c).collect(),
            mean_gradient: self.sum_gradient.iter().map(|s| s / c).collect(),
            steps: self.count,
        })
    }

    /// Returns the current window and starts a new one.
    pub fn drain(&mut self) -> Result<Window> {
        let w = self.snapshot()?;
        self.sum_activation.iter_mut().for_each(|x| *x = 0.0);
        self.sum_gradient.iter_mut().for_each(|x| *x = 0.0);
        self.count = 0;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layer: NodeId,
    pub sites: Vec<NeuronSite>,
    /// Activation scores.
    pub s: Vec<f64>,
    /// Gradient scores.
    pub g: Vec<f64>,
    pub mean_activation: f64,
    pub mean_gradient: f64,
}

impl LayerScores {
    pub fn scores(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Redo => &self.s,
            Metric::Grama => &self.g,
        }
    }
}

fn normalize(values: &[f64]) -> (Vec<f64>, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        (vec![0.0; values.len()], mean)
    } else {
        (values.iter().map(|v| v / mean).collect(), mean)
    }
}

/// Normalizes a window layer by layer.
pub fn compute_scores(window: &Window) -> Vec<LayerScores> {
    let mut groups: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for (k, s) in window.sites.iter().enumerate() {
        groups.entry(s.layer).or_default().push(k);
    }
    groups
        .into_iter()
        .map(|(layer, idx)| {
            let act: Vec<f64> = idx.iter().map(|&k| window.mean_activation[k]).collect();
            let grad: Vec<f64> = idx.iter().map(|&k| window.mean_gradient[k]).collect();
            let (s, mean_activation) = normalize(&act);
            let (g, mean_gradient) = normalize(&grad);
            LayerScores {
                layer,
                sites: idx.iter().map(|&k| window.sites[k]).collect(),
                s,
                g,
                mean_activation,
                mean_gradient,
            }
        })
        .collect()
}

impl ActivityAccumulator {
    pub fn compute_scores(&self) -> Result<Vec<LayerScores>> {
        Ok(compute_scores(&self.snapshot()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub inactive: Vec<NeuronSite>,
    pub total: usize,
    pub ratio: f64,
}

/// Sites whose score under `metric` is `<= tau`.
pub fn classify(scores: &[LayerScores], tau: f64, metric: Metric) -> Result<Classification> {
    if !(tau >= 0.0) {
        return Err(PlabError::InvalidThreshold(tau));
    }
    let mut inactive = Vec::new();
    let mut total = 0;
    for layer in scores {
        total += layer.sites.len();
        for (site, &v) in layer.sites.iter().zip(layer.scores(metric)) {
            if v <= tau {
                inactive.push(*site);
            }
        }
    }
    let ratio = if total == 0 {
        0.0
    } else {
        inactive.len() as f64 / total as f64
    };
    Ok(Classification {
        inactive,
        total,
        ratio,
    })
}

/// Score of every site under `metric`, in site order.
pub fn site_scores(scores: &[LayerScores], metric: Metric) -> Vec<(NeuronSite, f64)> {
    let mut v: Vec<(NeuronSite, f64)> = scores
        .iter()
        .flat_map(|l| {
            l.sites
                .iter()
                .copied()
                .zip(l.scores(metric).iter().copied())
        })
        .collect();
    v.sort_by_key(|a| a.0);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    HighHigh,
    HighExprLowLearn,
    LowExprHighLearn,
    LowLow,
}

impl Quadrant {
    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::HighHigh => "high/high",
            Quadrant::HighExprLowLearn => "high-expr/low-learn",
            Quadrant::LowExprHighLearn => "low-expr/high-learn",
            Quadrant::LowLow => "low/low",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantEntry {
    pub site: NeuronSite,
    pub top_expressive: bool,
    pub top_learning: bool,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantReport {
    pub entries: Vec<QuadrantEntry>,
}

impl QuadrantReport {
    pub fn count(&self, q: Quadrant) -> usize {
        self.entries.iter().filter(|e| e.quadrant == q).count()
    }
}

fn top_quarter(values: &[f64]) -> Vec<bool> {
    let k = values.len().div_ceil(4);
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable: equal values keep ascending site order.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut flags = vec![false; values.len()];
    for &i in &order[..k] {
        flags[i] = true;
    }
    flags
}

/// Ranks all sites by raw mean `|h|` and by raw mean `|grad|` independently and
/// flags the top quarter of each ranking.
pub fn quadrants(window: &Window) -> Result<QuadrantReport> {
    let n = window.sites.len();
    if n < 4 {
        return Err(PlabError::TooFewSites(n));
    }
    let expr = top_quarter(&window.mean_activation);
    let learn = top_quarter(&window.mean_gradient);
    let entries = window
        .sites
        .iter()
        .enumerate()
        .map(|(k, &site)| {
            let quadrant = match (expr[k], learn[k]) {
                (true, true) => Quadrant::HighHigh,
                (true, false) => Quadrant::HighExprLowLearn,
                (false, true) => Quadrant::LowExprHighLearn,
                (false, false) => Quadrant::LowLow,
            };
            QuadrantEntry {
                site,
                top_expressive: expr[k],
                top_learning: learn[k],
                quadrant,
            }
        })
        .collect();
    Ok(QuadrantReport { entries })
}
