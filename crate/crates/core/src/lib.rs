//! kdkit: a small, self-contained toolkit for compressing transformer
//! classifiers by knowledge distillation.
//!
//! The pieces, bottom up:
//!
//! - [`numkit`]: f64 tensors and reverse-mode autodiff on a flat tape.
//! - [`encoder`]: a from-scratch transformer encoder classifier.
//! - [`sps`]: shuffled parameter sharing — doubling a student's depth by
//!   aliasing upper layers onto lower-layer parameter sets, optionally
//!   swapping query/key roles in the aliased copies.
//! - [`ptp`]: pretraining the student on labels derived from the teacher's
//!   own predictions (correct/incorrect x confident/unconfident).
//! - [`distill`]: teacher finetuning, student initialization, and the
//!   composite distillation loss (hard CE + soft KL + hidden-state MSE).
//! - [`tasks`]: deterministic synthetic datasets, TSV ingestion, metrics.
//! - [`pipeline`]: config-driven end-to-end orchestration used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod numkit;
pub mod pipeline;
pub mod ptp;
pub mod report;
pub mod sps;
pub mod tasks;

pub use error::{KdError, Result};
