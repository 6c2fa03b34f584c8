//! Composite-loss representation learning with a trainable processor.
//!
//! A processor `f` is trained to keep the information in `x` that predicts a
//! downstream label `y` while discarding what only predicts a pretext target
//! `z`. Self-supervised learning then runs on `f(x)`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod synthdata;
pub mod trainer;

pub use diagnostics::{CapacityClass, CapacityProbeSpec, CapacityReport, CriteriaReport};
pub use error::{Error, Result};
pub use harness::{RunRecord, SummaryRow, SweepSpec, SweepVariable};
pub use linalg::{Matrix, RidgeParam};
pub use losses::{LossBreakdown, LossFamily, LossSpec};
pub use models::{Activation, InitScale, ParamVector, Processor, ProcessorShape};
pub use pipeline::{DistributionSpec, PipelineConfig, ProcessorInit, ProcessorSetup, SslResult};
pub use synthdata::{Dataset, PrefixGaussianSpec, SigmaLinearModel, SigmaLinearSpec, SplitConfig};
pub use trainer::{HeadMode, TrainConfig, TrainTrace};
