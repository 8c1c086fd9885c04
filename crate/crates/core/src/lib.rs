//! Scale-aware sparse attention (box, fixed-scale, adaptive-scale and
//! masked instance attention) and a miniature plain single-scale detector
//! built on them, with a small reverse-mode tensor engine underneath.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod parallel;
pub mod textconf;

pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
