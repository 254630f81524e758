//! The invariant battery behind `plab verify`, plus the randomized nets and
//! fixed instances it runs on.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::Result;
use crate::metrics::{classify, compute_scores, ActivityAccumulator, LayerScores, Metric};
use crate::net::gradcheck::{check_model, ProbeLoss, FD_EPS};
use crate::net::model::Fault;
use crate::net::{ActivationKind, Model, ModelBuilder, NeuronSite, NodeId, SiteKind, TapRecord};
use crate::reset::{apply_policy, GraceTable, ResetPolicy};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const GRAD_TOL: f64 = 1e-6;
pub const NORM_TOL: f64 = 1e-9;
pub const LOSS_SCALES: [f64; 3] = [1e-3, 1.0, 1e3];

/// Shape of a randomized check net.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetShape {
    pub activation: ActivationKind,
    pub layernorm: bool,
    pub residual: bool,
}

impl fmt::Display for NetShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            self.activation,
            if self.layernorm { "+ln" } else { "" },
            if self.residual { "+res" } else { "" }
        )
    }
}

impl NetShape {
    /// Every activation kind crossed with layernorm on/off and residual on/off.
    pub fn all() -> Vec<NetShape> {
        let mut v = Vec::new();
        for activation in ActivationKind::ALL {
            for layernorm in [false, true] {
                for residual in [false, true] {
                    v.push(NetShape {
                        activation,
                        layernorm,
                        residual,
                    });
                }
            }
        }
        v
    }
}

const IN: usize = 3;
const WIDTH: usize = 3;
const OUT: usize = 2;

fn dense(
    b: &mut ModelBuilder,
    x: NodeId,
    shape: &NetShape,
    act: bool,
    rng: &mut RngState,
) -> Result<NodeId> {
    let mut h = b.linear(x, WIDTH, rng)?;
    if shape.layernorm {
        h = b.layer_norm(h)?;
    }
    if act {
        h = b.activation(h, shape.activation)?;
    }
    Ok(h)
}

/// A small net (at most 100 parameters): two hidden layers, or a stem plus
/// one residual block, and a linear head. Layernorm gains and shifts are
/// randomized so they carry non-trivial gradients.
pub fn random_net(shape: &NetShape, rng: &mut RngState) -> Result<Model> {
    let mut b = Model::builder(IN);
    let mut x = dense(&mut b, ModelBuilder::INPUT, shape, true, rng)?;
    if shape.residual {
        let h = dense(&mut b, x, shape, true, rng)?;
        let h = dense(&mut b, h, shape, false, rng)?;
        x = b.add(h, x)?;
    } else {
        x = dense(&mut b, x, shape, true, rng)?;
    }
    let out = b.linear(x, OUT, rng)?;
    let mut m = b.finish(out)?;
    for id in m.param_ids() {
        if matches!(
            id.kind,
            crate::net::model::ParamKind::Gain | crate::net::model::ParamKind::Shift
        ) {
            let base = if id.kind == crate::net::model::ParamKind::Gain {
                1.0
            } else {
                0.0
            };
            for v in m.param_mut(id).unwrap().data_mut() {
                *v = base + rng.uniform(-0.5, 0.5);
            }
        }
    }
    Ok(m)
}

/// A serial ReLU MLP of random depth and widths; a random subset of units
/// gets a strongly negative bias so dead units occur.
pub fn random_relu_mlp(rng: &mut RngState, kind: ActivationKind) -> Result<Model> {
    let input = 2 + rng.below(3);
    let depth = 1 + rng.below(3);
    let mut b = Model::builder(input);
    let mut x = ModelBuilder::INPUT;
    for _ in 0..depth {
        let w = 2 + rng.below(4);
        x = b.linear(x, w, rng)?;
        x = b.activation(x, kind)?;
    }
    let out = b.linear(x, 1 + rng.below(2), rng)?;
    let mut m = b.finish(out)?;
    let biases: Vec<_> = m
        .param_ids()
        .into_iter()
        .filter(|id| id.kind == crate::net::model::ParamKind::Bias && id.node != m.output_node())
        .collect();
    for id in biases {
        for v in m.param_mut(id).unwrap().data_mut() {
            if rng.uniform(0.0, 1.0) < 0.3 {
                *v = -10.0;
            }
        }
    }
    Ok(m)
}

pub fn random_batch(rows: usize, cols: usize, rng: &mut RngState) -> Result<Tensor> {
    let mut x = Tensor::zeros(&[rows, cols])?;
    for v in x.data_mut() {
        *v = rng.normal();
    }
    Ok(x)
}

/// Taps and per-layer scores of one forward/backward on `x` under the probe
/// loss scaled by `scale`.
pub fn batch_scores(
    model: &mut Model,
    x: &Tensor,
    loss: &ProbeLoss,
    scale: f64,
) -> Result<(Vec<TapRecord>, Vec<LayerScores>)> {
    let y = model.forward(x)?;
    let bw = model.backward(&loss.grad(&y).scale(scale))?;
    let mut acc = ActivityAccumulator::new(model.active_sites());
    acc.accumulate(&bw.taps)?;
    let scores = compute_scores(&acc.snapshot()?);
    Ok((bw.taps, scores))
}

/// Two-branch instance: a dead ReLU branch added onto its input. The fused
/// unit 0 stays near the input while the in-branch site carries no gradient.
pub struct OpacityInstance {
    pub model: Model,
    pub batch: Tensor,
    pub fusion: NodeId,
    pub branch_site: NeuronSite,
}

pub fn residual_opacity_instance() -> Result<OpacityInstance> {
    let mut b = Model::builder(2);
    let fixed = crate::init::InitSpec::Constant { value: 0.0 };
    let inner = b.linear_with(
        ModelBuilder::INPUT,
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?,
        Tensor::from_vec(&[2], vec![-5.0, 0.0])?,
        fixed,
        fixed,
    )?;
    let act = b.activation(inner, ActivationKind::Relu)?;
    let proj = b.linear_with(
        act,
        Tensor::identity(2)?,
        Tensor::zeros(&[2])?,
        fixed,
        fixed,
    )?;
    let fusion = b.add(proj, ModelBuilder::INPUT)?;
    let head = b.linear_with(
        fusion,
        Tensor::from_rows(&[vec![1.0, 1.0]])?,
        Tensor::zeros(&[1])?,
        fixed,
        fixed,
    )?;
    let model = b.finish(head)?;
    Ok(OpacityInstance {
        model,
        batch: Tensor::from_rows(&[vec![1.0, 0.5], vec![0.8, -0.3], vec![2.0, 1.0]])?,
        fusion,
        branch_site: NeuronSite {
            layer: act,
            unit: 0,
            kind: SiteKind::PostActivation,
        },
    })
}

impl OpacityInstance {
    /// `(mean |fused value| of unit 0, tap gradient of the in-branch site)`.
    pub fn measure(&self) -> Result<(f64, f64)> {
        let mut m = self.model.clone();
        let cache = m.forward_pass(&self.batch, &[])?;
        let fused = cache.value(self.fusion);
        let fused_mean = (0..fused.rows())
            .map(|r| fused.get2(r, 0).abs())
            .sum::<f64>()
            / fused.rows() as f64;
        let y = m.forward(&self.batch)?;
        let bw = m.backward(&Tensor::alloc(y.shape(), 1.0)?)?;
        let tap = bw
            .taps
            .iter()
            .find(|t| t.site == self.branch_site)
            .expect("branch site is tapped");
        Ok((fused_mean, tap.gradient))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Pass,
    Fail(String),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub cases: usize,
    pub status: Status,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            Status::Pass => write!(f, "PASS    {} ({} cases)", self.name, self.cases),
            Status::Fail(why) => write!(f, "FAIL    {} ({} cases): {why}", self.name, self.cases),
            Status::Skipped(why) => write!(f, "SKIPPED {}: {why}", self.name),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self
            .results
            .iter()
            .any(|r| matches!(r.status, Status::Fail(_)))
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn outcome(name: &str, cases: usize, failure: Option<String>) -> PropertyResult {
    PropertyResult {
        name: name.to_string(),
        cases,
        status: failure.map_or(Status::Pass, Status::Fail),
    }
}

/// Reverse-mode parameter and tap gradients against central differences on
/// every [`NetShape`].
pub fn check_finite_differences(seed: u64, fault: Option<Fault>) -> Result<PropertyResult> {
    let mut rng = RngState::new(seed, 10);
    let shapes = NetShape::all();
    for shape in &shapes {
        let mut model = random_net(shape, &mut rng)?;
        model.inject_fault(fault);
        let x = random_batch(3, IN, &mut rng)?;
        let loss = ProbeLoss::random(&[3, OUT], &mut rng)?;
        let r = check_model(&model, &x, &loss, FD_EPS)?;
        if !r.passes(GRAD_TOL) {
            let site = r.worst_site.map_or("-".to_string(), |s| s.to_string());
            return Ok(outcome(
                "finite-differences",
                shapes.len(),
                Some(format!(
                    "net {shape}: worst tap error {:.3e} at site {site}; worst parameter error {:.3e} at flat index {}",
                    r.max_tap_rel,
                    r.max_param_rel,
                    r.worst_param.unwrap_or(0)
                )),
            ));
        }
    }
    Ok(outcome("finite-differences", shapes.len(), None))
}

/// Zero mean activation implies zero tap gradient, and the τ = 0 activation
/// flags are a subset of the gradient flags. Only serial ReLU MLPs qualify.
pub fn check_theorem_one(seed: u64, kind: ActivationKind, trials: usize) -> Result<PropertyResult> {
    let name = format!("dormant-implies-zero-gradient ({kind})");
    if !kind.is_relu() {
        return Ok(PropertyResult {
            name,
            cases: 0,
            status: Status::Skipped("property is scoped to serial ReLU MLPs".into()),
        });
    }
    let mut rng = RngState::new(seed, 11);
    for t in 0..trials {
        let mut model = random_relu_mlp(&mut rng, kind)?;
        let rows = 1 + rng.below(6);
        let x = random_batch(rows, model.input_dim(), &mut rng)?;
        let loss = ProbeLoss::random(&[rows, model.output_dim()], &mut rng)?;
        let (taps, scores) = batch_scores(&mut model, &x, &loss, 1.0)?;
        if let Some(tap) = taps
            .iter()
            .find(|t| t.activation == 0.0 && t.gradient != 0.0)
        {
            return Ok(outcome(
                &name,
                trials,
                Some(format!(
                    "trial {t}: site {} has zero activation but gradient {:e}",
                    tap.site, tap.gradient
                )),
            ));
        }
        let redo: BTreeSet<_> = classify(&scores, 0.0, Metric::Redo)?
            .inactive
            .into_iter()
            .collect();
        let grama: BTreeSet<_> = classify(&scores, 0.0, Metric::Grama)?
            .inactive
            .into_iter()
            .collect();
        if let Some(s) = redo.difference(&grama).next() {
            return Ok(outcome(
                &name,
                trials,
                Some(format!(
                    "trial {t}: site {s} flagged by redo but not grama at tau 0"
                )),
            ));
        }
    }
    Ok(outcome(&name, trials, None))
}

/// Per-layer means of S and G equal 1 on non-degenerate layers, and G does
/// not move under loss scaling.
pub fn check_normalization(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rng = RngState::new(seed, 12);
    let shapes = NetShape::all();
    let mut mean_fail = None;
    let mut scale_fail = None;
    for shape in &shapes {
        let mut model = random_net(shape, &mut rng)?;
        let x = random_batch(4, IN, &mut rng)?;
        let loss = ProbeLoss::random(&[4, OUT], &mut rng)?;
        let (_, base) = batch_scores(&mut model, &x, &loss, 1.0)?;
        for l in &base {
            for (metric, raw) in [
                (Metric::Redo, l.mean_activation),
                (Metric::Grama, l.mean_gradient),
            ] {
                if raw == 0.0 {
                    continue;
                }
                let v = l.scores(metric);
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                if (mean - 1.0).abs() > NORM_TOL && mean_fail.is_none() {
                    mean_fail = Some(format!(
                        "net {shape}, layer {}: mean {metric} score {mean}",
                        l.layer
                    ));
                }
            }
        }
        for c in LOSS_SCALES {
            let (_, scaled) = batch_scores(&mut model, &x, &loss, c)?;
            for (a, b) in base.iter().zip(&scaled) {
                for (k, (u, v)) in a.g.iter().zip(&b.g).enumerate() {
                    if (u - v).abs() > NORM_TOL && scale_fail.is_none() {
                        scale_fail = Some(format!(
                            "net {shape}, site {}: G {u} vs {v} at loss scale {c}",
                            a.sites[k]
                        ));
                    }
                }
            }
        }
    }
    Ok(vec![
        outcome("layer-mean-normalization", shapes.len(), mean_fail),
        outcome(
            "loss-scale-invariance",
            shapes.len() * LOSS_SCALES.len(),
            scale_fail,
        ),
    ])
}

/// Sites of `model` whose value reaches a residual add without passing a
/// linear layer, directly or through the activation applied to them.
pub fn skip_fed_sites(model: &Model) -> BTreeSet<NeuronSite> {
    model
        .active_sites()
        .into_iter()
        .filter(|s| reaches_skip(model, s.layer))
        .collect()
}

fn reaches_skip(model: &Model, id: NodeId) -> bool {
    model.feeds_skip(id) || model.consumers(id).iter().any(|&c| model.feeds_skip(c))
}

/// One function-preservation scenario: a ReLU net (serial or residual, with
/// or without layernorm) in which some units are silenced on the probe batch.
pub fn preservation_scenario(
    rng: &mut RngState,
    residual: bool,
    layernorm: bool,
) -> Result<(Model, Tensor)> {
    let shape = NetShape {
        activation: ActivationKind::Relu,
        layernorm,
        residual,
    };
    let mut model = random_net(&shape, rng)?;
    let ids = model.param_ids();
    for id in ids {
        use crate::net::model::ParamKind;
        if reaches_skip(&model, id.node) {
            continue;
        }
        let silence = match id.kind {
            ParamKind::Bias if !layernorm && id.node != model.output_node() => -10.0,
            ParamKind::Shift => -5.0,
            _ => continue,
        };
        for v in model.param_mut(id).unwrap().data_mut() {
            if rng.uniform(0.0, 1.0) < 0.4 {
                *v = silence;
            }
        }
    }
    let x = random_batch(4, IN, rng)?;
    Ok((model, x))
}

/// Resetting sites that contribute nothing on the probe batch leaves the
/// probe outputs bitwise unchanged. Sites feeding a residual add are out of
/// scope: their skip path is not part of the reset footprint.
pub fn check_function_preservation(seed: u64, trials: usize) -> Result<PropertyResult> {
    let mut rng = RngState::new(seed, 13);
    let mut resets = 0;
    for t in 0..trials {
        let residual = t % 2 == 1;
        let layernorm = t % 4 >= 2;
        let (mut model, x) = preservation_scenario(&mut rng, residual, layernorm)?;
        let loss = ProbeLoss::random(&[x.rows(), OUT], &mut rng)?;
        let (_, scores) = batch_scores(&mut model, &x, &loss, 1.0)?;
        let out_of_scope = skip_fed_sites(&model);
        let scoped: Vec<LayerScores> = scores
            .into_iter()
            .filter(|l| l.sites.iter().all(|s| !out_of_scope.contains(s)))
            .collect();
        let before = model.predict(&x)?;
        for metric in [Metric::Redo, Metric::Grama] {
            let policy = ResetPolicy {
                tau: 0.0,
                include_layernorm: true,
                ..ResetPolicy::new(metric)
            };
            let events = apply_policy(
                &mut model,
                &scoped,
                &policy,
                0,
                &mut rng.derive(t as u64),
                &mut GraceTable::new(),
                None,
            )?;
            resets += events.len();
            let after = model.predict(&x)?;
            if !after.bitwise_eq(&before) {
                let sites: Vec<String> = events.iter().map(|e| e.site.to_string()).collect();
                return Ok(outcome(
                    "function-preservation",
                    trials,
                    Some(format!(
                        "scenario {t} ({metric}): output changed after resetting {}",
                        sites.join(", ")
                    )),
                ));
            }
        }
    }
    if resets == 0 {
        return Ok(outcome(
            "function-preservation",
            trials,
            Some("no scenario triggered a reset".into()),
        ));
    }
    Ok(outcome("function-preservation", trials, None))
}

/// Raising τ never removes a site from the inactive set.
pub fn check_monotone_tau(seed: u64, trials: usize) -> Result<PropertyResult> {
    let mut rng = RngState::new(seed, 14);
    for t in 0..trials {
        let n = 1 + rng.below(12);
        let sites: Vec<NeuronSite> = (0..n)
            .map(|k| NeuronSite {
                layer: 1 + k % 3,
                unit: k / 3,
                kind: SiteKind::PostActivation,
            })
            .collect();
        let draw = |rng: &mut RngState| -> f64 {
            if rng.uniform(0.0, 1.0) < 0.2 {
                0.0
            } else {
                rng.uniform(0.0, 2.0).powi(3)
            }
        };
        let act: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let grad: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let scores = compute_scores(&crate::metrics::Window {
            sites,
            mean_activation: act,
            mean_gradient: grad,
            steps: 1,
        });
        let (a, b) = (rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5));
        let (lo, hi) = (a.min(b), a.max(b));
        for metric in [Metric::Redo, Metric::Grama] {
            let small: BTreeSet<_> = classify(&scores, lo, metric)?
                .inactive
                .into_iter()
                .collect();
            let large: BTreeSet<_> = classify(&scores, hi, metric)?
                .inactive
                .into_iter()
                .collect();
            if let Some(s) = small.difference(&large).next() {
                return Ok(outcome(
                    "monotone-tau",
                    trials,
                    Some(format!(
                        "trial {t}: {s} inactive at tau {lo} but not at {hi} ({metric})"
                    )),
                ));
            }
        }
    }
    Ok(outcome("monotone-tau", trials, None))
}

/// Runs the whole battery.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let s = opts.seed;
    let mut results = vec![check_finite_differences(s, opts.fault)?];
    results.push(check_theorem_one(s, ActivationKind::Relu, 50)?);
    results.push(check_theorem_one(
        s,
        ActivationKind::LeakyRelu {
            slope: crate::net::activation::DEFAULT_LEAKY_SLOPE,
        },
        50,
    )?);
    results.extend(check_normalization(s)?);
    let inst = residual_opacity_instance()?;
    let (fused, grad) = inst.measure()?;
    results.push(outcome(
        "residual-opacity-instance",
        1,
        (!(fused >= 0.1 && grad == 0.0))
            .then(|| format!("fused |h| {fused}, in-branch gradient {grad}")),
    ));
    results.push(check_function_preservation(s, 24)?);
    results.push(check_monotone_tau(s, 200)?);
    Ok(VerifyReport { results })
}
