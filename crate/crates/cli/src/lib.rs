//! Subcommands of the `spygr` executable, callable as library functions.

pub mod bench;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod manifest;
pub mod run;
pub mod verify;

pub use bench::{cmd_bench, BenchReport};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result, EXIT_CONFIG, EXIT_FAILED, EXIT_OK};
pub use heatmap::{cmd_heatmap, HeatmapReport};
pub use manifest::RunManifest;
pub use run::{cmd_ablate, cmd_train, TrainReport};
pub use verify::{cmd_verify, Fault, VerifyReport};
