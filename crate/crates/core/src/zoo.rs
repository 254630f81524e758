//! Network shapes: serial MLPs and BRO residual nets, plus actor/critic heads.

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::net::{ActivationKind, Model, ModelBuilder, NodeId};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Mlp,
    Bro,
}

fn default_width() -> usize {
    32
}

fn default_depth() -> usize {
    2
}

fn default_multiplier() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default)]
    pub family: Family,
    /// 0 means "filled in by the experiment".
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub output_dim: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hidden layers (mlp) or residual blocks (bro).
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub activation: ActivationKind,
    /// Unset means the family default: on for bro, off for mlp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layernorm: Option<bool>,
    #[serde(default = "default_multiplier")]
    pub depth_multiplier: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            family: Family::Mlp,
            input_dim: 0,
            output_dim: 0,
            width: default_width(),
            depth: default_depth(),
            activation: ActivationKind::Relu,
            layernorm: None,
            depth_multiplier: 1,
        }
    }
}

impl ArchSpec {
    pub fn mlp(input_dim: usize, output_dim: usize, width: usize, depth: usize) -> Self {
        ArchSpec {
            input_dim,
            output_dim,
            width,
            depth,
            ..Default::default()
        }
    }

    pub fn bro(input_dim: usize, output_dim: usize, width: usize, blocks: usize) -> Self {
        ArchSpec {
            family: Family::Bro,
            input_dim,
            output_dim,
            width,
            depth: blocks,
            ..Default::default()
        }
    }

    pub fn with_dims(&self, input_dim: usize, output_dim: usize) -> Self {
        ArchSpec {
            input_dim,
            output_dim,
            ..self.clone()
        }
    }

    pub fn uses_layernorm(&self) -> bool {
        self.layernorm.unwrap_or(self.family == Family::Bro)
    }

    /// Hidden layers or blocks after applying the multiplier.
    pub fn effective_depth(&self) -> usize {
        self.depth * self.depth_multiplier
    }

    /// Checks shape-independent fields.
    pub fn validate_shape(&self) -> Result<()> {
        if self.width < 4 {
            return Err(PlabError::InvalidArch(format!(
                "width must be >= 4, got {}",
                self.width
            )));
        }
        if self.depth == 0 {
            return Err(PlabError::InvalidArch("depth must be >= 1".into()));
        }
        if self.depth_multiplier == 0 {
            return Err(PlabError::InvalidArch(
                "depth_multiplier must be >= 1".into(),
            ));
        }
        if self.family == Family::Bro && self.layernorm == Some(false) {
            return Err(PlabError::InvalidArch(
                "bro family requires layernorm".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(PlabError::InvalidArch(format!(
                "input and output dims must be >= 1, got {} -> {}",
                self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }
}

fn dense(
    b: &mut ModelBuilder,
    input: NodeId,
    width: usize,
    ln: bool,
    act: Option<ActivationKind>,
    rng: &mut RngState,
) -> Result<NodeId> {
    let mut x = b.linear(input, width, rng)?;
    if ln {
        x = b.layer_norm(x)?;
    }
    if let Some(kind) = act {
        x = b.activation(x, kind)?;
    }
    Ok(x)
}

/// Builds the network for `spec`, drawing every initial parameter from `rng`.
///
/// BRO layout: stem `Linear -> LayerNorm -> act`, then per block
/// `Linear -> LayerNorm -> act -> Linear -> LayerNorm`, added to the block
/// input, and a final `Linear` head.
pub fn build(spec: &ArchSpec, rng: &mut RngState) -> Result<Model> {
    spec.validate()?;
    let mut b = Model::builder(spec.input_dim);
    let mut x = ModelBuilder::INPUT;
    let depth = spec.effective_depth();
    match spec.family {
        Family::Mlp => {
            for _ in 0..depth {
                x = dense(
                    &mut b,
                    x,
                    spec.width,
                    spec.uses_layernorm(),
                    Some(spec.activation),
                    rng,
                )?;
            }
        }
        Family::Bro => {
            x = dense(&mut b, x, spec.width, true, Some(spec.activation), rng)?;
            for _ in 0..depth {
                let h = dense(&mut b, x, spec.width, true, Some(spec.activation), rng)?;
                let h = dense(&mut b, h, spec.width, true, None, rng)?;
                x = b.add(h, x)?;
            }
        }
    }
    let out = b.linear(x, spec.output_dim, rng)?;
    b.finish(out)
}

/// Actor, twin critics.
pub struct ActorCritic {
    pub actor: Model,
    pub critics: [Model; 2],
}

/// Actor maps state to `2 * action_dim` (mean, log-std pre-activations);
/// each critic maps `state ++ action` to a scalar. The three nets draw from
/// distinct child streams of `rng`.
pub fn build_actor_critic(
    state_dim: usize,
    action_dim: usize,
    spec: &ArchSpec,
    rng: &RngState,
) -> Result<ActorCritic> {
    if state_dim == 0 || action_dim == 0 {
        return Err(PlabError::InvalidArch(format!(
            "state and action dims must be >= 1, got {state_dim}, {action_dim}"
        )));
    }
    let actor = build(
        &spec.with_dims(state_dim, 2 * action_dim),
        &mut rng.derive(0),
    )?;
    let critic_spec = spec.with_dims(state_dim + action_dim, 1);
    let q1 = build(&critic_spec, &mut rng.derive(1))?;
    let q2 = build(&critic_spec, &mut rng.derive(2))?;
    Ok(ActorCritic {
        actor,
        critics: [q1, q2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::SiteKind;
    use crate::tensor::Tensor;

    fn rng() -> RngState {
        RngState::new(0, 1)
    }

    #[test]
    fn mlp_site_count() {
        let m = build(&ArchSpec::mlp(3, 2, 4, 2), &mut rng()).unwrap();
        assert_eq!(m.list_sites().len(), 8);
    }

    #[test]
    fn bro_site_count() {
        let m = build(&ArchSpec::bro(3, 2, 8, 1), &mut rng()).unwrap();
        let sites = m.list_sites();
        let post = sites
            .iter()
            .filter(|s| s.kind == SiteKind::PostActivation)
            .count();
        let ln = sites
            .iter()
            .filter(|s| s.kind == SiteKind::LayernormFeature)
            .count();
        assert_eq!(post, 16);
        assert_eq!(ln, 24);
    }

    #[test]
    fn depth_multiplier_adds_one_block() {
        let one = build(&ArchSpec::bro(3, 2, 8, 1), &mut rng()).unwrap();
        let mut spec = ArchSpec::bro(3, 2, 8, 1);
        spec.depth_multiplier = 2;
        let two = build(&spec, &mut rng()).unwrap();
        let block = 2 * (8 * 8 + 8) + 2 * (2 * 8);
        assert_eq!(two.num_params() - one.num_params(), block);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            build(&ArchSpec::mlp(3, 2, 3, 1), &mut rng()),
            Err(PlabError::InvalidArch(_))
        ));
        assert!(build(&ArchSpec::mlp(0, 2, 8, 1), &mut rng()).is_err());
        assert!(build(&ArchSpec::mlp(3, 2, 8, 0), &mut rng()).is_err());
        let mut s = ArchSpec::bro(3, 2, 8, 1);
        s.layernorm = Some(false);
        assert!(build(&s, &mut rng()).is_err());
    }

    #[test]
    fn actor_critic_dims() {
        let ac = build_actor_critic(4, 2, &ArchSpec::mlp(0, 0, 32, 2), &rng()).unwrap();
        assert_eq!(ac.actor.output_dim(), 4);
        assert_eq!(ac.critics[0].input_dim(), 6);
        assert_eq!(ac.critics[1].output_dim(), 1);
        assert_ne!(ac.critics[0].flat_params(), ac.critics[1].flat_params());
        assert!(build_actor_critic(0, 2, &ArchSpec::default(), &rng()).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut m = build(&ArchSpec::bro(3, 2, 8, 1), &mut rng()).unwrap();
        // Zero the block's two linears and layernorm parameters (nodes 4..=8).
        for id in m.param_ids() {
            if (4..=8).contains(&id.node) {
                m.param_mut(id)
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![-0.5, 0.5, 0.1]]).unwrap();
        let cache = m.forward_pass(&x, &[]).unwrap();
        let add = m
            .nodes()
            .iter()
            .position(|n| matches!(n.op, crate::net::Op::Add { .. }))
            .unwrap();
        assert_eq!(cache.value(add).data(), cache.value(3).data());
    }

    #[test]
    fn spec_json_defaults() {
        let s: ArchSpec = serde_json::from_str(r#"{"family":"bro"}"#).unwrap();
        assert_eq!(s.width, 32);
        assert!(s.uses_layernorm());
        let back: ArchSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<ArchSpec>(r#"{"widht":3}"#).is_err());
    }
}
