//! Command implementations behind the `ugnn` binary: run configuration,
//! the checkpoint format, the training loop, evaluation reports, mask
//! prediction, and the distortion-benchmark ablation report.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod palette;
pub mod predict;
pub mod report;
pub mod train;

pub use config::{LossKind, OptimConfig, RunConfig};
