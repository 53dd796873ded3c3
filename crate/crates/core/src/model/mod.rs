//! Model parameters, text-side sidecars, the forward pass, and checkpoints.

mod catalog;
mod checkpoint;
mod forward;
mod params;

pub use catalog::{ClassCatalog, KnowledgeBank, KnowledgeGroup, LOGIT_SCALE};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use forward::{
    aggregate, argmax, build_adjacency, classify, detect, forward, forward_on_tape, inject_knowledge, tape_aggregate,
    tape_classify, tape_detect, tape_inject_knowledge, tape_temporal_adapt, temporal_adapt, temporal_mixing,
    ForwardOutput, TapeOutputs,
};
pub use params::{ModelConfig, ModelParams, ParamVars, DEFAULT_SIGMA, PARAM_NAMES};
