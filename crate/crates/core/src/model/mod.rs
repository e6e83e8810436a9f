//! ViT backbone, decision networks and their parameter store.

pub mod checkpoint;
mod config;
pub mod forward;
mod params;

pub use checkpoint::CheckpointError;
pub use config::ModelConfig;
pub use forward::{
    attention_head, block_forward, classify, decision_forward, forward, infer, msa, patchify,
    patchify_embed, BlockGates, BlockTrace, ForwardPass, Gate, GateSource, UsageVars,
};
pub use params::{
    BlockParams, DecisionParams, HeadParams, Layout, Model, ParamId, ParamVars, Trainable,
};

#[cfg(test)]
mod tests;
