//! Class-incremental training on seeded Gaussian clusters.
//!
//! Training starts with `initial_classes` classes; every `epochs_per_class`
//! epochs one more class joins the training set until all `classes` are in.
//! Accuracy is measured each epoch on a held-out set covering every seen
//! class, drawn from a separate random stream.

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::metrics::{classify, site_scores, ActivityAccumulator, LayerScores, Metric, Window};
use crate::net::{Model, NeuronSite, SiteKind};
use crate::optim::Adam;
use crate::reset::{prune_sites, ResetEngine, ResetEvent, ResetPolicy};
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;
use crate::zoo::{build, ArchSpec};

/// Threshold separating active from inactive units in the cohort study.
pub const COHORT_TAU: f64 = 0.0095;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualTask {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub epochs_per_class: usize,
    pub initial_classes: usize,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Extra epochs after the last class joins.
    pub tail_epochs: usize,
}

impl Default for ContinualTask {
    fn default() -> Self {
        ContinualTask {
            classes: 10,
            dim: 32,
            separation: 3.0,
            noise: 1.0,
            epochs_per_class: 15,
            initial_classes: 2,
            train_per_class: 64,
            heldout_per_class: 64,
            batch_size: 32,
            lr: 3e-2,
            tail_epochs: 0,
        }
    }
}

impl ContinualTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(PlabError::config(format!("task.{field}"), msg));
        if self.classes == 0 {
            return bad("classes", "must be >= 1");
        }
        if self.initial_classes == 0 || self.initial_classes > self.classes {
            return bad("initial_classes", "must lie in [1, classes]");
        }
        if self.dim == 0 {
            return bad("dim", "must be >= 1");
        }
        if !(self.separation >= 0.0 && self.noise >= 0.0) {
            return bad("noise", "separation and noise must be >= 0");
        }
        if self.epochs_per_class == 0 {
            return bad("epochs_per_class", "must be >= 1");
        }
        if self.train_per_class == 0 || self.heldout_per_class == 0 {
            return bad("train_per_class", "sample counts must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        (self.classes - self.initial_classes + 1) * self.epochs_per_class + self.tail_epochs
    }

    /// Number of classes seen during `epoch`.
    pub fn seen_at(&self, epoch: usize) -> usize {
        (self.initial_classes + epoch / self.epochs_per_class).min(self.classes)
    }

    pub fn is_injection(&self, epoch: usize) -> bool {
        epoch > 0
            && epoch.is_multiple_of(self.epochs_per_class)
            && self.seen_at(epoch) > self.seen_at(epoch - 1)
    }

    pub fn fit_arch(&self, arch: &ArchSpec) -> Result<ArchSpec> {
        let input = if arch.input_dim == 0 {
            self.dim
        } else {
            arch.input_dim
        };
        let output = if arch.output_dim == 0 {
            self.classes
        } else {
            arch.output_dim
        };
        if input != self.dim || output != self.classes {
            return Err(PlabError::InvalidArch(format!(
                "arch maps {input} -> {output}, task needs {} -> {}",
                self.dim, self.classes
            )));
        }
        Ok(arch.with_dims(input, output))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Heldout,
}

/// Identity of a generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleId {
    pub split: Split,
    pub class: usize,
    pub index: usize,
}

/// The fixed data of one seeded task instance.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub seed: u64,
    pub means: Vec<Vec<f64>>,
    pub train: Vec<Vec<Vec<f64>>>,
    pub heldout: Vec<Vec<Vec<f64>>>,
}

impl TaskStream {
    pub fn generate(task: &ContinualTask, seed: u64) -> Result<Self> {
        task.validate()?;
        let base = RngState::new(seed, streams::DATA);
        let mut mrng = base.derive(0);
        let scale = task.separation / (task.dim as f64).sqrt();
        let means: Vec<Vec<f64>> = (0..task.classes)
            .map(|_| (0..task.dim).map(|_| mrng.normal() * scale).collect())
            .collect();
        let draw = |rng: &mut RngState, mean: &[f64], n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| mean.iter().map(|m| m + task.noise * rng.normal()).collect())
                .collect()
        };
        let held = RngState::new(seed, streams::HELDOUT);
        let mut train = Vec::with_capacity(task.classes);
        let mut heldout = Vec::with_capacity(task.classes);
        for (c, mean) in means.iter().enumerate() {
            train.push(draw(
                &mut base.derive(c as u64 + 1),
                mean,
                task.train_per_class,
            ));
            heldout.push(draw(
                &mut held.derive(c as u64),
                mean,
                task.heldout_per_class,
            ));
        }
        Ok(TaskStream {
            seed,
            means,
            train,
            heldout,
        })
    }

    pub fn train_ids(&self, seen: usize) -> Vec<SampleId> {
        ids(&self.train, seen, Split::Train)
    }

    pub fn heldout_ids(&self, seen: usize) -> Vec<SampleId> {
        ids(&self.heldout, seen, Split::Heldout)
    }

    pub fn sample(&self, id: SampleId) -> &[f64] {
        match id.split {
            Split::Train => &self.train[id.class][id.index],
            Split::Heldout => &self.heldout[id.class][id.index],
        }
    }

    fn batch(&self, ids: &[SampleId]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| self.sample(i).to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}

fn ids(data: &[Vec<Vec<f64>>], seen: usize, split: Split) -> Vec<SampleId> {
    data.iter()
        .take(seen)
        .enumerate()
        .flat_map(|(class, xs)| {
            (0..xs.len()).map(move |index| SampleId {
                split,
                class,
                index,
            })
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (b, k) = (logits.rows(), logits.cols());
    let mut grad = Tensor::alloc(&[b, k], 0.0).expect("non-empty logits");
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        let g = grad.row_mut(r);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - m).exp() / z / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    (loss / b as f64, grad)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `ids` the model labels correctly.
pub fn accuracy(model: &Model, stream: &TaskStream, ids: &[SampleId]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in ids.chunks(256) {
        let out = model.predict(&stream.batch(chunk)?)?;
        for (r, id) in chunk.iter().enumerate() {
            if argmax(out.row(r)) == id.class {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// One trace row per epoch; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualRow {
    pub step: u64,
    pub epoch: usize,
    pub seen_classes: usize,
    pub accuracy: f64,
    pub inactive_ratio_grama: f64,
    pub inactive_ratio_redo: f64,
    pub resets_cum: u64,
    pub seed: u64,
}

/// Score histories of a cohort of sites sampled while inactive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub sampled_epoch: usize,
    pub sites: Vec<NeuronSite>,
    /// `histories[k][e]`: G of site `k` at the `e`-th epoch after sampling.
    pub histories: Vec<Vec<f64>>,
}

impl Cohort {
    /// Fraction of the cohort whose score ever rose above `tau`.
    pub fn revived_fraction(&self, tau: f64) -> f64 {
        if self.sites.is_empty() {
            return 0.0;
        }
        let n = self
            .histories
            .iter()
            .filter(|h| h.iter().any(|&g| g > tau))
            .count();
        n as f64 / self.sites.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContinualTrace {
    pub rows: Vec<ContinualRow>,
    pub events: Vec<ResetEvent>,
    pub cohort: Option<Cohort>,
    pub pruned: Vec<NeuronSite>,
    /// Epoch window captured on request.
    pub window: Option<Window>,
}

impl ContinualTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.accuracy)
    }

    /// Best accuracy while only the initial classes were seen.
    pub fn initial_phase_peak(&self) -> f64 {
        let first = self.rows.first().map_or(0, |r| r.seen_classes);
        self.rows
            .iter()
            .filter(|r| r.seen_classes == first)
            .map(|r| r.accuracy)
            .fold(0.0, f64::max)
    }

    pub fn final_inactive_ratio(&self, metric: Metric) -> f64 {
        self.rows.last().map_or(0.0, |r| match metric {
            Metric::Grama => r.inactive_ratio_grama,
            Metric::Redo => r.inactive_ratio_redo,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Extras {
    freeze_fraction: Option<f64>,
    cohort: Option<(usize, usize)>,
    prune_instead: bool,
    window_at: Option<usize>,
}

/// Trains one seed under the class-incremental schedule.
pub fn run_continual(
    task: &ContinualTask,
    arch: &ArchSpec,
    policy: Option<&ResetPolicy>,
    seed: u64,
) -> Result<ContinualTrace> {
    run(task, arch, policy, seed, Extras::default())
}

/// Vanilla run that samples sites with `G <= tau` at the end of
/// `sample_epoch` (default: last epoch before the first injection) and
/// records their per-epoch scores afterwards.
pub fn trace_inactive_cohort(
    task: &ContinualTask,
    arch: &ArchSpec,
    cohort_size: usize,
    sample_epoch: Option<usize>,
    seed: u64,
) -> Result<ContinualTrace> {
    let epoch = sample_epoch.unwrap_or(task.epochs_per_class - 1);
    run(
        task,
        arch,
        None,
        seed,
        Extras {
            cohort: Some((epoch, cohort_size)),
            ..Extras::default()
        },
    )
}

/// For each fraction `f`, a policy run that prunes the `f` lowest-G
/// fraction of sites at the first check and keeps them frozen. Returns
/// `(f, final accuracy)` pairs.
pub fn run_controlled_ratio(
    task: &ContinualTask,
    arch: &ArchSpec,
    policy: &ResetPolicy,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(PlabError::config(
            "task.fractions",
            "fractions must lie in [0, 1]",
        ));
    }
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(PlabError::config(
            "task.fractions",
            "fractions must be increasing",
        ));
    }
    fractions
        .iter()
        .map(|&f| {
            let extras = Extras {
                freeze_fraction: (f > 0.0).then_some(f),
                ..Extras::default()
            };
            let trace = run(task, arch, Some(policy), seed, extras)?;
            Ok((f, trace.final_accuracy()))
        })
        .collect()
}

/// Policy run in which every check prunes its candidates instead of
/// resetting them. Pruned sites are logged as events.
pub fn run_prune_study(
    task: &ContinualTask,
    arch: &ArchSpec,
    policy: &ResetPolicy,
    seed: u64,
) -> Result<ContinualTrace> {
    let extras = Extras {
        prune_instead: true,
        ..Extras::default()
    };
    run(task, arch, Some(policy), seed, extras)
}

/// Ordinary run that also keeps the tap window of epoch `epoch`.
pub fn capture_window(
    task: &ContinualTask,
    arch: &ArchSpec,
    policy: Option<&ResetPolicy>,
    epoch: usize,
    seed: u64,
) -> Result<ContinualTrace> {
    if epoch >= task.total_epochs() {
        return Err(PlabError::config(
            "task.at_epoch",
            format!("must be below the epoch count {}", task.total_epochs()),
        ));
    }
    let extras = Extras {
        window_at: Some(epoch),
        ..Extras::default()
    };
    run(task, arch, policy, seed, extras)
}

fn ratio(scores: &[LayerScores], metric: Metric) -> Result<f64> {
    Ok(classify(scores, metric.default_tau(), metric)?.ratio)
}

fn lowest_fraction(scores: &[LayerScores], fraction: f64) -> Vec<NeuronSite> {
    let mut all = site_scores(scores, Metric::Grama);
    let k = ((fraction * all.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<NeuronSite> = all.into_iter().take(k).map(|(s, _)| s).collect();
    out.sort();
    out
}

fn run(
    task: &ContinualTask,
    arch: &ArchSpec,
    policy: Option<&ResetPolicy>,
    seed: u64,
    extras: Extras,
) -> Result<ContinualTrace> {
    task.validate()?;
    let arch = task.fit_arch(arch)?;
    if let Some(p) = policy {
        p.validate()?;
    }
    let stream = TaskStream::generate(task, seed)?;
    let mut model = build(&arch, &mut RngState::new(seed, streams::INIT))?;
    let mut opt = Adam::new(task.lr);
    let mut shuffle = RngState::new(seed, streams::SHUFFLE);
    let mut engine =
        policy.map(|p| ResetEngine::new(p.clone(), RngState::new(seed, streams::RESET)));
    let mut cohort_rng = RngState::new(seed, streams::COHORT);

    let mut epoch_acc = ActivityAccumulator::new(model.active_sites());
    let mut check_acc = ActivityAccumulator::new(model.active_sites());
    let mut trace = ContinualTrace::default();
    let mut step: u64 = 0;
    let mut pending_prune = extras.freeze_fraction;

    let mut check = |model: &mut Model,
                     opt: &mut Adam,
                     acc: &mut ActivityAccumulator,
                     epoch_acc: &mut ActivityAccumulator,
                     step: u64,
                     trace: &mut ContinualTrace|
     -> Result<()> {
        let Some(engine) = engine.as_mut() else {
            return Ok(());
        };
        if acc.count() == 0 {
            return Ok(());
        }
        let mut window = acc.drain()?;
        if let Some(f) = pending_prune.take() {
            let sites = lowest_fraction(&window.scores(), f);
            prune_sites(model, &sites, Some(opt))?;
            trace.pruned = sites;
            acc.remove_sites(model.pruned_sites());
            epoch_acc.remove_sites(model.pruned_sites());
            window = window.without(model.pruned_sites());
        }
        if extras.prune_instead {
            let p = &engine.policy;
            let scores = window.scores();
            let candidates = classify(&scores, p.tau, p.metric)?;
            let value: std::collections::HashMap<NeuronSite, f64> =
                site_scores(&scores, p.metric).into_iter().collect();
            let sites: Vec<NeuronSite> = candidates
                .inactive
                .into_iter()
                .filter(|s| p.include_layernorm || s.kind != SiteKind::LayernormFeature)
                .collect();
            prune_sites(model, &sites, Some(opt))?;
            acc.remove_sites(model.pruned_sites());
            epoch_acc.remove_sites(model.pruned_sites());
            trace.pruned.extend(sites.iter().copied());
            trace
                .events
                .extend(sites.into_iter().map(|site| ResetEvent {
                    step,
                    site,
                    metric: p.metric,
                    value: value[&site],
                    tau: p.tau,
                }));
            return Ok(());
        }
        trace
            .events
            .extend(engine.apply(model, &window.scores(), step, Some(opt))?);
        Ok(())
    };

    for epoch in 0..task.total_epochs() {
        let seen = task.seen_at(epoch);
        if task.is_injection(epoch) {
            check(
                &mut model,
                &mut opt,
                &mut check_acc,
                &mut epoch_acc,
                step,
                &mut trace,
            )?;
        }
        let mut ids = stream.train_ids(seen);
        shuffle.shuffle(&mut ids);
        for chunk in ids.chunks(task.batch_size) {
            let x = stream.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|i| i.class).collect();
            let logits = model.forward(&x)?;
            let (_, grad) = softmax_xent(&logits, &labels);
            let bw = model.backward(&grad)?;
            opt.step(&mut model, &bw.grads);
            epoch_acc.accumulate(&bw.taps)?;
            check_acc.accumulate(&bw.taps)?;
            step += 1;
            if let Some(p) = policy {
                if step.is_multiple_of(p.period) {
                    check(
                        &mut model,
                        &mut opt,
                        &mut check_acc,
                        &mut epoch_acc,
                        step,
                        &mut trace,
                    )?;
                }
            }
        }
        let window = epoch_acc.drain()?;
        let scores = window.scores();
        if extras.window_at == Some(epoch) {
            trace.window = Some(window.clone());
        }
        if let Some((at, size)) = extras.cohort {
            record_cohort(&mut trace, &scores, epoch, at, size, &mut cohort_rng);
        }
        trace.rows.push(ContinualRow {
            step,
            epoch,
            seen_classes: seen,
            accuracy: accuracy(&model, &stream, &stream.heldout_ids(seen))?,
            inactive_ratio_grama: ratio(&scores, Metric::Grama)?,
            inactive_ratio_redo: ratio(&scores, Metric::Redo)?,
            resets_cum: trace.events.len() as u64,
            seed,
        });
    }
    Ok(trace)
}

fn record_cohort(
    trace: &mut ContinualTrace,
    scores: &[LayerScores],
    epoch: usize,
    at: usize,
    size: usize,
    rng: &mut RngState,
) {
    let g: std::collections::HashMap<NeuronSite, f64> =
        site_scores(scores, Metric::Grama).into_iter().collect();
    if epoch == at {
        let mut inactive: Vec<NeuronSite> = site_scores(scores, Metric::Grama)
            .into_iter()
            .filter(|&(_, v)| v <= COHORT_TAU)
            .map(|(s, _)| s)
            .collect();
        if inactive.len() > size {
            rng.shuffle(&mut inactive);
            inactive.truncate(size);
            inactive.sort();
        }
        trace.cohort = Some(Cohort {
            sampled_epoch: epoch,
            histories: vec![Vec::new(); inactive.len()],
            sites: inactive,
        });
    } else if epoch > at {
        if let Some(c) = trace.cohort.as_mut() {
            for (site, h) in c.sites.iter().zip(c.histories.iter_mut()) {
                h.push(g.get(site).copied().unwrap_or(0.0));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> ContinualTask {
        ContinualTask {
            classes: 4,
            dim: 8,
            epochs_per_class: 2,
            train_per_class: 16,
            heldout_per_class: 16,
            tail_epochs: 1,
            ..Default::default()
        }
    }

    fn arch() -> ArchSpec {
        ArchSpec::mlp(0, 0, 8, 2)
    }

    #[test]
    fn schedule() {
        let t = ContinualTask::default();
        assert_eq!(t.seen_at(0), 2);
        assert_eq!(t.seen_at(14), 2);
        assert_eq!(t.seen_at(15), 3);
        assert!(t.is_injection(15));
        assert!(!t.is_injection(16));
        assert_eq!(t.seen_at(t.total_epochs() - 1), 10);
        assert_eq!(t.total_epochs(), 9 * 15);
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let l = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let (loss, g) = softmax_xent(&l, &[1, 2]);
        assert!(loss > 0.0);
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!((g.get2(1, 2) - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_trivially_accurate() {
        let task = ContinualTask {
            classes: 1,
            initial_classes: 1,
            epochs_per_class: 1,
            tail_epochs: 0,
            ..small()
        };
        let tr = run_continual(&task, &arch(), None, 0).unwrap();
        assert_eq!(tr.rows.len(), 1);
        assert_eq!(tr.rows[0].accuracy, 1.0);
    }

    #[test]
    fn label_support_grows_by_one_per_injection() {
        let task = small();
        let s = TaskStream::generate(&task, 3).unwrap();
        for e in 1..task.total_epochs() {
            let a: HashSet<usize> = s
                .train_ids(task.seen_at(e - 1))
                .iter()
                .map(|i| i.class)
                .collect();
            let b: HashSet<usize> = s
                .train_ids(task.seen_at(e))
                .iter()
                .map(|i| i.class)
                .collect();
            let grow = if task.is_injection(e) { 1 } else { 0 };
            assert_eq!(b.len(), a.len() + grow);
        }
    }

    #[test]
    fn heldout_disjoint_from_train() {
        let task = small();
        let s = TaskStream::generate(&task, 1).unwrap();
        let train: Vec<&[f64]> = s.train_ids(4).iter().map(|&i| s.sample(i)).collect();
        for id in s.heldout_ids(4) {
            assert_eq!(id.split, Split::Heldout);
            assert!(!train.contains(&s.sample(id)));
        }
    }

    #[test]
    fn dims_checked() {
        let bad = ArchSpec::mlp(5, 0, 8, 1);
        assert!(matches!(
            run_continual(&small(), &bad, None, 0),
            Err(PlabError::InvalidArch(_))
        ));
    }

    #[test]
    fn reproducible() {
        let p = ResetPolicy {
            period: 5,
            ..ResetPolicy::grama()
        };
        let a = run_continual(&small(), &arch(), Some(&p), 7).unwrap();
        let b = run_continual(&small(), &arch(), Some(&p), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.windows(2).all(|w| w[0].step < w[1].step));
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }

    #[test]
    fn vanilla_has_no_resets() {
        let tr = run_continual(&small(), &arch(), None, 2).unwrap();
        assert!(tr.events.is_empty());
        assert!(tr.rows.iter().all(|r| r.resets_cum == 0));
    }

    #[test]
    fn empty_cohort() {
        let tr = trace_inactive_cohort(&small(), &arch(), 0, None, 0).unwrap();
        let c = tr.cohort.unwrap();
        assert!(c.sites.is_empty());
        assert_eq!(c.revived_fraction(COHORT_TAU), 0.0);
    }

    #[test]
    fn zero_fraction_matches_plain_policy() {
        let p = ResetPolicy {
            period: 5,
            ..ResetPolicy::grama()
        };
        let plain = run_continual(&small(), &arch(), Some(&p), 4).unwrap();
        let r = run_controlled_ratio(&small(), &arch(), &p, &[0.0], 4).unwrap();
        assert_eq!(r[0].1, plain.final_accuracy());
    }

    #[test]
    fn full_fraction_is_bias_only() {
        let p = ResetPolicy {
            period: 5,
            ..ResetPolicy::grama()
        };
        let task = small();
        let tr = run(
            &task,
            &arch(),
            Some(&p),
            4,
            Extras {
                freeze_fraction: Some(1.0),
                ..Extras::default()
            },
        )
        .unwrap();
        assert_eq!(tr.pruned.len(), 16);
        // Every hidden unit is cut off, so the net predicts one class everywhere.
        let acc = tr.final_accuracy();
        let per_class = 1.0 / task.classes as f64;
        assert!((acc - per_class).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn fractions_validated() {
        let p = ResetPolicy::grama();
        assert!(run_controlled_ratio(&small(), &arch(), &p, &[0.5, 0.1], 0).is_err());
        assert!(run_controlled_ratio(&small(), &arch(), &p, &[1.5], 0).is_err());
    }
}
