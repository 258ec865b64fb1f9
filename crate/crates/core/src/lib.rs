//! A small laboratory for neural collapse under class imbalance.
//!
//! * [`numerics`]: tensors and a define-by-run reverse-mode engine with
//!   stop-gradient
//! * [`etf`]: simplex equiangular tight frames
//! * [`ncmetrics`]: NC1–NC4 diagnostics
//! * [`losses`]: cross-entropy, re-weighting, hybrid contrastive, P2P and the
//!   bilateral-branch schedule
//! * [`model`]: MLP encoder / heads / classifier and SGD with momentum
//! * [`data`]: long-tailed synthetic data, views, batching, CSV
//! * [`harness`]: training runs, sweeps and outputs

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod etf;
pub mod harness;
pub mod losses;
pub mod model;
pub mod ncmetrics;
pub mod numerics;

pub use error::{Error, Result};
