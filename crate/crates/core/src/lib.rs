//! Synthetic two-segment reasoning environment with tabular policies, group
//! relative policy optimization variants, two-phase masked training,
//! cross-generation evaluation and thinking/answer coupling diagnostics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod trainers;
pub mod types;

pub use error::{LabError, Result};
