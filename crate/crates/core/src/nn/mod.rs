//! Minimal layered network with hand-written reverse-mode gradients.
//!
//! A [`ComputeGraph`] is a fixed sequence of layers. Every dense or
//! convolutional layer is *quantizable*: its input passes through an
//! activation [`EdgeMix`] and its weight through a weight [`EdgeMix`]
//! before the affine map, so the same code path serves full-precision,
//! fixed-policy, softmax-mixture and coalition-masked evaluation.

mod checkpoint;
mod graph;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{
    build_network, mlp_spec, softmax_cross_entropy, ComputeGraph, EdgeGrads, LayerQuant,
    LayerSpec, Loss, Param,
};
pub use optim::{optimizer_step, Optimizer, OptimizerKind, TrainConfig};
