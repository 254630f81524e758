//! Layered feed-forward graphs, reverse-mode differentiation, and per-neuron
//! taps of `|h|` and the gradient each unit receives.

pub mod activation;
pub mod gradcheck;
pub mod model;
pub mod pass;

pub use activation::ActivationKind;
pub use model::{
    Incoming, LayerNorm, Linear, Model, ModelBuilder, NeuronSite, Node, NodeId, Op, ParamId,
    ParamKind, SiteKind,
};
pub use pass::{Backward, ForwardCache, ParamGrads, Perturbation, TapRecord};
