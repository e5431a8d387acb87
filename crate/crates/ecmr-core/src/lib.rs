//! Desk-scale continual image restoration built around a grow-prune-mine loop:
//! a frozen pretrained backbone grows isolated channel groups per degradation
//! task, structural-entropy analysis prunes the redundant groups, and compound
//! tasks mine the surviving single-degradation experts through a low-rank
//! mixing matrix. Everything runs on a small dense-tensor reverse-mode
//! autodiff engine in plain Rust, deterministic from explicit seeds.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod pruning;
pub mod sep;
pub mod skmm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
