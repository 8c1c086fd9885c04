//! Dense tensors, reverse-mode differentiation and optimization.

pub mod container;
pub mod gradcheck;
mod ops;
mod param;
mod rng;
mod sample;
mod tape;
mod tensor;

pub use ops::default_groups;
pub use param::{adamw_step, AdamW, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use sample::sample_point;
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::{numel, strides, Tensor};
