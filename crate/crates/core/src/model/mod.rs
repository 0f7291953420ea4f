//! The relation network: parallel relation layers over per-unit features,
//! gated fusion with optional relation dropout, and per-unit classifiers.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::{ClassifierSharing, FusionMode, ModelConfig};
pub use network::{
    classify, forward, fuse, fuse_with_dropout, fusion_weights, relation_coefficients,
    run_relation_module, topk_aggregate, DropoutPlan, FeatureSet, LayerOutput, Mode,
    RelationCoefficients,
};
pub use params::{ClassifierParams, FusionParams, Head, ModelParams, RelationLayerParams};

pub(crate) use network::{forward_on, BoundParams};
