//! Operational surface for `tshf-core`: configuration, datasets,
//! checkpoints, training drivers, experiments and the `tshf` CLI.

// `!(x >= lo)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod selftest;
pub mod trainer;

pub use checkpoint::{Checkpoint, TrainState};
pub use config::RunConfig;
pub use error::{HarnessError, Result};
