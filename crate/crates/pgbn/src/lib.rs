//! File formats, dataset generation and the command implementations behind
//! the `pgbn` binary. The numerical work lives in `pgbn-core`, re-exported
//! here as [`core`].

pub use pgbn_core as core;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod history;
pub mod manifest;
pub mod synthgen;
pub mod volume;

pub use error::{FormatError, Result};
