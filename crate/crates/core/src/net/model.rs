use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::init::{sample_init, InitSpec};
use crate::net::activation::ActivationKind;
use crate::net::pass::ForwardCache;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub type NodeId = usize;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub input: NodeId,
    /// `[fan_out, fan_in]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
    pub weight_init: InitSpec,
    pub bias_init: InitSpec,
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub input: NodeId,
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Linear(Linear),
    Activation { input: NodeId, kind: ActivationKind },
    LayerNorm(LayerNorm),
    Add { lhs: NodeId, rhs: NodeId },
    Concat { lhs: NodeId, rhs: NodeId },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input => vec![],
            Op::Linear(l) => vec![l.input],
            Op::Activation { input, .. } => vec![*input],
            Op::LayerNorm(n) => vec![n.input],
            Op::Add { lhs, rhs } | Op::Concat { lhs, rhs } => vec![*lhs, *rhs],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Linear(_) => "linear",
            Op::Activation { .. } => "activation",
            Op::LayerNorm(_) => "layernorm",
            Op::Add { .. } => "residual-add",
            Op::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    PostActivation,
    LayernormFeature,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::PostActivation => "post-activation",
            SiteKind::LayernormFeature => "layernorm-feature",
        }
    }
}

/// Identity of an instrumented neuron. `layer` is the id of the node the
/// site belongs to, so ordering by `(layer, unit)` is topological.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronSite {
    pub layer: NodeId,
    pub unit: usize,
    pub kind: SiteKind,
}

impl fmt::Display for NeuronSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]@{}", self.kind.as_str(), self.unit, self.layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub node: NodeId,
    pub kind: ParamKind,
}

/// The parameters that directly produce a unit's pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Incoming {
    /// Row `unit` of this linear layer, plus its bias entry.
    LinearRow(NodeId),
    /// Gain/shift entry `unit` of this layernorm.
    LayerNormFeature(NodeId),
    None,
}

/// Test-only fault injection used by the mutation check of `plab verify`.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipReluBackwardSign,
}

/// A feed-forward DAG. Nodes are stored in topological order: every node's
/// inputs have smaller ids.
#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) nodes: Vec<Node>,
    pub(crate) output: NodeId,
    pub(crate) frozen: BTreeMap<ParamId, Vec<bool>>,
    pub(crate) pruned: BTreeSet<NeuronSite>,
    pub(crate) cache: Option<ForwardCache>,
    pub(crate) fault: Option<Fault>,
}

impl Model {
    pub fn builder(input_width: usize) -> ModelBuilder {
        ModelBuilder {
            nodes: vec![Node {
                op: Op::Input,
                width: input_width,
            }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.nodes[0].width
    }

    pub fn output_dim(&self) -> usize {
        self.nodes[self.output].width
    }

    /// Every instrumented site in topological order (layer, then unit).
    pub fn list_sites(&self) -> Vec<NeuronSite> {
        let mut sites = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let kind = match node.op {
                Op::Activation { .. } => SiteKind::PostActivation,
                Op::LayerNorm(_) => SiteKind::LayernormFeature,
                _ => continue,
            };
            sites.extend((0..node.width).map(|unit| NeuronSite {
                layer: id,
                unit,
                kind,
            }));
        }
        sites
    }

    /// Sites that still take part in metric accumulation (not pruned).
    pub fn active_sites(&self) -> Vec<NeuronSite> {
        self.list_sites()
            .into_iter()
            .filter(|s| !self.pruned.contains(s))
            .collect()
    }

    pub fn is_pruned(&self, site: &NeuronSite) -> bool {
        self.pruned.contains(site)
    }

    pub fn pruned_sites(&self) -> &BTreeSet<NeuronSite> {
        &self.pruned
    }

    pub fn has_site(&self, site: &NeuronSite) -> bool {
        let Some(node) = self.nodes.get(site.layer) else {
            return false;
        };
        let kind_ok = matches!(
            (&node.op, site.kind),
            (Op::Activation { .. }, SiteKind::PostActivation)
                | (Op::LayerNorm(_), SiteKind::LayernormFeature)
        );
        kind_ok && site.unit < node.width
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (node, n) in self.nodes.iter().enumerate() {
            match n.op {
                Op::Linear(_) => {
                    ids.push(ParamId {
                        node,
                        kind: ParamKind::Weight,
                    });
                    ids.push(ParamId {
                        node,
                        kind: ParamKind::Bias,
                    });
                }
                Op::LayerNorm(_) => {
                    ids.push(ParamId {
                        node,
                        kind: ParamKind::Gain,
                    });
                    ids.push(ParamId {
                        node,
                        kind: ParamKind::Shift,
                    });
                }
                _ => {}
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match (&self.nodes.get(id.node)?.op, id.kind) {
            (Op::Linear(l), ParamKind::Weight) => Some(&l.weight),
            (Op::Linear(l), ParamKind::Bias) => Some(&l.bias),
            (Op::LayerNorm(n), ParamKind::Gain) => Some(&n.gain),
            (Op::LayerNorm(n), ParamKind::Shift) => Some(&n.shift),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match (&mut self.nodes.get_mut(id.node)?.op, id.kind) {
            (Op::Linear(l), ParamKind::Weight) => Some(&mut l.weight),
            (Op::Linear(l), ParamKind::Bias) => Some(&mut l.bias),
            (Op::LayerNorm(n), ParamKind::Gain) => Some(&mut n.gain),
            (Op::LayerNorm(n), ParamKind::Shift) => Some(&mut n.shift),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_ids()
            .into_iter()
            .map(|id| self.param(id).map_or(0, Tensor::len))
            .sum()
    }

    /// All parameters flattened in `param_ids` order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_ids()
            .into_iter()
            .flat_map(|id| self.param(id).unwrap().data().to_vec())
            .collect()
    }

    pub fn frozen_mask(&self, id: ParamId) -> Option<&[bool]> {
        self.frozen.get(&id).map(Vec::as_slice)
    }

    pub fn freeze(&mut self, id: ParamId, index: usize) {
        let len = self.param(id).map_or(0, Tensor::len);
        let mask = self.frozen.entry(id).or_insert_with(|| vec![false; len]);
        mask[index] = true;
    }

    pub fn is_frozen(&self, id: ParamId, index: usize) -> bool {
        self.frozen.get(&id).is_some_and(|m| m[index])
    }

    /// Nodes that read `id`'s output, in topological order.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.inputs().contains(&id))
            .map(|(c, _)| c)
            .collect()
    }

    /// Every `(linear node, column)` whose weight multiplies unit `unit` of
    /// node `id`. Concatenation is followed (it relocates the unit without
    /// mixing it); residual adds, activations and layernorms carry no weights
    /// for the unit and are not followed.
    pub fn linear_readers(&self, id: NodeId, unit: usize) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        self.collect_readers(id, unit, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_readers(&self, id: NodeId, unit: usize, out: &mut Vec<(NodeId, usize)>) {
        for c in self.consumers(id) {
            match &self.nodes[c].op {
                Op::Linear(_) => out.push((c, unit)),
                Op::Concat { lhs, rhs } => {
                    if *lhs == id {
                        self.collect_readers(c, unit, out);
                    }
                    if *rhs == id {
                        self.collect_readers(c, self.nodes[*lhs].width + unit, out);
                    }
                }
                _ => {}
            }
        }
    }

    /// Whether unit values of `id` flow into a residual add (directly or via concat).
    pub fn feeds_skip(&self, id: NodeId) -> bool {
        self.consumers(id)
            .into_iter()
            .any(|c| match self.nodes[c].op {
                Op::Add { .. } => true,
                Op::Concat { .. } => self.feeds_skip(c),
                _ => false,
            })
    }

    /// Incoming parameters of a post-activation unit.
    pub fn incoming(&self, activation: NodeId) -> Incoming {
        let Op::Activation { input, .. } = self.nodes[activation].op else {
            return Incoming::None;
        };
        match self.nodes[input].op {
            Op::Linear(_) => Incoming::LinearRow(input),
            Op::LayerNorm(_) => Incoming::LayerNormFeature(input),
            _ => Incoming::None,
        }
    }

    /// Polyak averaging: `self <- (1 - rate) * self + rate * online`.
    pub fn soft_update_from(&mut self, online: &Model, rate: f64) -> Result<()> {
        for id in self.param_ids() {
            let src = online
                .param(id)
                .ok_or_else(|| PlabError::InvalidArch(format!("missing parameter {id:?}")))?;
            let dst = self.param_mut(id).unwrap();
            if dst.shape() != src.shape() {
                return Err(PlabError::InvalidShape("soft update shape mismatch".into()));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
        Ok(())
    }

    /// Copies parameter values (not caches, masks or prune state).
    pub fn copy_params_from(&mut self, other: &Model) -> Result<()> {
        self.soft_update_from(other, 1.0)
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (id, n) in self.nodes.iter().enumerate() {
            let ins = n.op.inputs();
            let extra = match &n.op {
                Op::Activation { kind, .. } => format!(" {kind}"),
                _ => String::new(),
            };
            s.push_str(&format!(
                "{id:>3}: {}{extra} width={} inputs={ins:?}\n",
                n.op.name(),
                n.width
            ));
        }
        s
    }
}

/// Appends nodes in topological order.
pub struct ModelBuilder {
    nodes: Vec<Node>,
}

impl ModelBuilder {
    pub const INPUT: NodeId = 0;

    fn check(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .get(id)
            .map(|n| n.width)
            .ok_or_else(|| PlabError::InvalidArch(format!("node {id} does not exist yet")))
    }

    fn push(&mut self, op: Op, width: usize) -> NodeId {
        self.nodes.push(Node { op, width });
        self.nodes.len() - 1
    }

    pub fn width(&self, id: NodeId) -> usize {
        self.nodes[id].width
    }

    /// Linear layer with weights and bias drawn `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn linear(&mut self, input: NodeId, out: usize, rng: &mut RngState) -> Result<NodeId> {
        let fan_in = self.check(input)?;
        if out == 0 {
            return Err(PlabError::InvalidArch(
                "linear layer with zero outputs".into(),
            ));
        }
        let init = InitSpec::UniformFanIn { fan_in };
        let weight = sample_init(&init, &[out, fan_in], rng)?;
        let bias = sample_init(&init, &[out], rng)?;
        self.linear_with(input, weight, bias, init, init)
    }

    pub fn linear_with(
        &mut self,
        input: NodeId,
        weight: Tensor,
        bias: Tensor,
        weight_init: InitSpec,
        bias_init: InitSpec,
    ) -> Result<NodeId> {
        let fan_in = self.check(input)?;
        let out = weight.rows();
        if weight.shape() != [out, fan_in] || bias.shape() != [out] {
            return Err(PlabError::InvalidShape(format!(
                "linear expects weight [{out},{fan_in}] and bias [{out}], got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(self.push(
            Op::Linear(Linear {
                input,
                weight,
                bias,
                weight_init,
                bias_init,
            }),
            out,
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: ActivationKind) -> Result<NodeId> {
        let w = self.check(input)?;
        Ok(self.push(Op::Activation { input, kind }, w))
    }

    /// Layernorm with gain 1 and shift 0.
    pub fn layer_norm(&mut self, input: NodeId) -> Result<NodeId> {
        let w = self.check(input)?;
        Ok(self.push(
            Op::LayerNorm(LayerNorm {
                input,
                gain: Tensor::alloc(&[w], 1.0)?,
                shift: Tensor::zeros(&[w])?,
                eps: LAYER_NORM_EPS,
            }),
            w,
        ))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(lhs)?, self.check(rhs)?);
        if a != b {
            return Err(PlabError::InvalidShape(format!(
                "residual add of widths {a} and {b}"
            )));
        }
        Ok(self.push(Op::Add { lhs, rhs }, a))
    }

    pub fn concat(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(lhs)?, self.check(rhs)?);
        Ok(self.push(Op::Concat { lhs, rhs }, a + b))
    }

    pub fn finish(self, output: NodeId) -> Result<Model> {
        self.check(output)?;
        if self.nodes[0].width == 0 {
            return Err(PlabError::InvalidArch(
                "input width must be positive".into(),
            ));
        }
        Ok(Model {
            nodes: self.nodes,
            output,
            frozen: BTreeMap::new(),
            pruned: BTreeSet::new(),
            cache: None,
            fault: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(widths: &[usize]) -> Model {
        let mut rng = RngState::new(0, 1);
        let mut b = Model::builder(3);
        let mut cur = ModelBuilder::INPUT;
        for &w in widths {
            let l = b.linear(cur, w, &mut rng).unwrap();
            cur = b.activation(l, ActivationKind::Relu).unwrap();
        }
        let out = b.linear(cur, 2, &mut rng).unwrap();
        b.finish(out).unwrap()
    }

    #[test]
    fn sites_of_two_hidden_layers() {
        let m = mlp(&[4, 3]);
        let sites = m.list_sites();
        assert_eq!(sites.len(), 7);
        assert!(sites.windows(2).all(|w| w[0] < w[1]));
        assert!(sites.iter().all(|s| s.kind == SiteKind::PostActivation));
    }

    #[test]
    fn empty_model_has_no_sites() {
        let m = Model::builder(3).finish(ModelBuilder::INPUT).unwrap();
        assert!(m.list_sites().is_empty());
        assert_eq!(m.num_params(), 0);
    }

    #[test]
    fn readers_follow_concat_not_add() {
        let mut rng = RngState::new(0, 1);
        let mut b = Model::builder(2);
        let l = b.linear(0, 2, &mut rng).unwrap();
        let a = b.activation(l, ActivationKind::Relu).unwrap();
        let c = b.concat(0, a).unwrap();
        let l2 = b.linear(c, 2, &mut rng).unwrap();
        let s = b.add(a, l2).unwrap();
        let out = b.linear(s, 1, &mut rng).unwrap();
        let m = b.finish(out).unwrap();
        assert_eq!(m.linear_readers(a, 1), vec![(l2, 3)]);
        assert!(m.feeds_skip(a));
        assert_eq!(m.incoming(a), Incoming::LinearRow(l));
    }

    #[test]
    fn add_requires_equal_widths() {
        let mut rng = RngState::new(0, 1);
        let mut b = Model::builder(2);
        let l = b.linear(0, 3, &mut rng).unwrap();
        assert!(b.add(0, l).is_err());
    }
}
