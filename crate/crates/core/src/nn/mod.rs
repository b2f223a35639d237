//! Minimal deterministic neural-network engine.

pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use graph::{BatchStats, Graph, Gradients, Reduction, Var, PROB_FLOOR};
pub use loss::{cross_entropy, kl_divergence, softmax};
pub use model::{format_arch, parse_arch, Layer, LayerSpec, Mode, Model};
pub use optim::{Optimizer, OptimizerState};
