//! Configuration, training, evaluation, benchmarking and export.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod heatmap;
pub mod train;

pub use bench::{bench_fusion, RtfReport};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Overrides, Profile};
pub use eval::{evaluate, EvalOptions, EvalReport};
pub use heatmap::{export_heatmaps, Heatmap};
pub use train::{batch_gradients, StepRecord, Trainer};
