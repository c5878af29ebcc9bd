//! Meta-learned structured sparsity for multi-task networks.
//!
//! The crate trains small multi-task convolutional networks whose shared
//! backbone is sparsified channel by channel with a group-lasso penalty. The
//! penalty strength is either fixed or meta-learned together with the model
//! initialization in a first-order bilevel loop over single- and multi-task
//! episodes. Everything runs on a small self-contained reverse-mode autodiff
//! engine ([`autodiff`]) so that every gradient can be checked against finite
//! differences.
//!
//! Module map:
//!
//! - [`autodiff`]: tensors, the operation tape, backward pass.
//! - [`sparsity`]: group partitions, penalty, proximal operators, masks, metrics.
//! - [`models`]: shared backbone with a residual connection plus per-task heads.
//! - [`mtl`]: task losses, uncertainty weighting, multi-task training and masked fine-tuning.
//! - [`meta`]: episodes, inner adaptation, regrowth, meta-training and meta-testing.
//! - [`synth`]: synthetic multi-task data with planted relevant channels.
//! - [`harness`]: run configuration, baseline pruning schedules, checkpoints and reports.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod meta;
pub mod models;
pub mod mtl;
pub mod sparsity;
pub mod synth;

pub use error::{Error, Result};
