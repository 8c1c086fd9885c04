//! Losses, set matching and the composite training objective.

pub mod boxes;
mod composite;
mod losses;
mod matching;

pub use composite::{
    build_cost_matrix, composite_loss, LossReport, LossWeights, PredictionSet, ProposalSet,
    RawTerms, TargetSet, Task,
};
pub use losses::{
    dice_loss, dice_rows, focal_loss, focal_loss_sum, focal_value, FOCAL_ALPHA, FOCAL_GAMMA,
};
pub use matching::{hungarian_match, MatchResult};
