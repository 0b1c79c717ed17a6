//! Transformer backbone, main classifier and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod model;

pub use config::{AttentionScale, ModelConfig};
pub use forward::{
    argmax, attention_probs, block_forward, block_forward_masked, classifier_logits, classify, embed,
    pool_and_classify, prepare_tokens, BlockOutput, HiddenState, CLS_ID,
};
pub use model::{BlockParams, HeadParams, Model, ModelIds, Stage, SubParams};
