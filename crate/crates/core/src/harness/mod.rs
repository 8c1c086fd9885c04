//! Training, evaluation, gradient checks, ablation grids and scale
//! profiling: everything the command-line tool drives.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod profile;
pub mod train;

pub use ablate::{run_ablation, AblationRow, Grid};
pub use config::{lr_schedule, RunConfig};
pub use metrics::{average_precision, evaluate_model, evaluate_predictions, MetricReport};
pub use profile::{scale_profile, ScaleProfile};
pub use train::{train, StepLog, TrainOutcome};
