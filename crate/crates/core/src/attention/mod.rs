//! Box attention, its fixed- and adaptive-scale variants, masked instance
//! attention and plain self-attention, as differentiable blocks over a
//! single-scale feature map.

mod grid;
pub mod layers;
mod masked;
mod selfattn;
mod window;

pub use grid::{
    default_lambda, AttentionConfig, AttentionOutput, GridAttention, Mechanism, OffsetSharing,
    RelPosEmbedding,
};
pub use masked::{attention_mask, MaskedConfig, MaskedInstanceAttention, MaskedOutput, MASKED};
pub use selfattn::{SelfAttention, SelfAttentionOutput};
pub use window::{refine_window, sample_grid, AnchorSet, HeadScaleAssignment, ReferenceWindow};
