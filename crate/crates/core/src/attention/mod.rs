//! Attention kernels, the learnable feature map and the transformer block.

mod block;
mod feature_map;
mod kernels;
mod partition;
mod weights;

pub use block::{
    attention_output, block_backward, block_forward, block_forward_cached, BlockCache, BlockKind,
    BlockParams, FeedForward,
};
pub use feature_map::{
    apply_feature_map, Dense, FeatureCache, FeatureMap, FeatureMapConfig, FeatureMapPair,
};
pub use kernels::{
    attention_backward, attention_forward, hybrid_attention, linear_attention, softmax_attention,
    AttentionCache, HybridMode, Kernel, QkvGrads, DENOMINATOR_GUARD,
};
pub use partition::{partition_tokens, TokenPartition};
pub use weights::{concat_heads, project_qkv, AttentionWeights, Qkv};
