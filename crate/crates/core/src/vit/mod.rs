//! Vision transformer with eight CLS-token tap points per block.

mod config;
mod forward;
mod taps;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    block_forward, embed_image, forward, forward_collect, forward_from, trace_block,
    trace_block_into, trace_image, BlockTrace, Collected, ForwardTrace,
};
pub use taps::{parse_tap_selection, Module, TapId, TapRecord};
pub use weights::{
    param_layout, BlockWeights, EmbeddingWeights, HeadWeights, LayerNormWeights, LinearWeights,
    ModelWeights, ParamRole,
};
