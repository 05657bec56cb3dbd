//! Desk-scale segmentation harness for the graph-reasoning layer.
//!
//! A synthetic task whose labels depend on a distant key patch, a small
//! conv net that can host the layer, SGD training with the poly schedule,
//! mIoU evaluation, and a multi-seed ablation runner.

pub mod ablation;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, AblationTable, Thresholds};
pub use data::{generate_dataset, Sample, TaskSpec, NUM_CLASSES};
pub use error::{HarnessError, Result};
pub use metrics::Confusion;
pub use model::{AblationRow, Model, ModelSpec};
pub use train::{evaluate, poly_lr, train, Evaluation, TraceRow, TrainConfig, TrainOutcome};
