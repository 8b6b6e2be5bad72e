//! Position-gated bag-of-local-features networks for volumetric classification.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small reverse-mode tensor engine, receptive-field geometry,
//! the network family, the training objective and protocol, the synthetic
//! planted-lesion generator and the analysis procedures. File formats and the
//! command-line surface live in the `pgbn` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
