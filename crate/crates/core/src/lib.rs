//! Hierarchical and conditional multi-task LSTMs for daily streamflow.
//!
//! The crate covers the full pipeline: dense numerics and a batched LSTM
//! with exact backpropagation through time, the six model variants and
//! their wiring, sliding-window segmentation with conditional inits, CSV
//! ingestion and a synthetic bucket-model generator, ensemble training, and
//! the evaluation and ablation harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod lstm;
pub mod numerics;
pub mod segmentation;
pub mod task_graph;
pub mod training;

pub use config::RunConfig;
pub use data::{BasinRecord, BasinSeries, NormStats, Region, SplitSpec};
pub use error::{Error, Result};
pub use evaluation::EvalReport;
pub use experiment::{AblationAxis, AblationGrid};
pub use numerics::{Mat, Rng};
pub use segmentation::{make_plan, SegmentPlan};
pub use task_graph::{param_count, ModelVariant, Network, Task, TaskGraphConfig};
pub use training::{Checkpoint, TrainConfig};
