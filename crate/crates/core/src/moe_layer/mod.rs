//! Sparse mixture-of-experts layers, MoE attention, transformer blocks and a
//! small language model assembled from them.

mod attention;
mod block;
mod layer;
mod model;

pub use attention::{Attention, AttentionOutput, Projection};
pub use block::{BlockDims, BlockOutput, TransformerBlock};
pub use layer::{combine, dispatch, expert_ffn, Expert, ExpertParams, MoeLayer, MoeLayerConfig, MoeOutput};
pub use model::{ModelConfig, ModelOutput, MoeLanguageModel};
