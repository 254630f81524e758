//! Plasticity lab: dormant-neuron metrics, resets and pruning on a small
//! reverse-mode engine, with continual-learning and SAC benchmarks.

pub mod continual;
pub mod error;
pub mod exp;
pub mod init;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod reset;
pub mod rl;
pub mod rng;
pub mod tensor;
pub mod verify;
pub mod zoo;

pub use error::{PlabError, Result};
pub use metrics::{
    classify, compute_scores, quadrants, ActivityAccumulator, Classification, LayerScores, Metric,
    Quadrant, QuadrantReport, Window,
};
pub use net::{ActivationKind, Model, ModelBuilder, NeuronSite, SiteKind, TapRecord};
pub use optim::Adam;
pub use reset::{apply_policy, prune_sites, reset_neuron, ResetEngine, ResetEvent, ResetPolicy};
pub use rng::RngState;
pub use tensor::Tensor;
pub use zoo::{build, build_actor_critic, ArchSpec, Family};
