//! Learning instance classifiers from bag-level majority labels.
//!
//! A bag is a set of feature vectors whose only supervision is the class held by
//! the strict majority of its instances. The counting network classifies every
//! instance through a low-temperature softmax so that the per-class sums behave
//! like instance counts, then picks the bag class from those counts with a second
//! temperature softmax. Everything is differentiable and trained end to end.
//!
//! Modules, bottom up:
//!
//! - [`diffcore`]: tensors, a reverse-mode tape, the numeric kernels (temperature
//!   softmax, instance summation, cross-entropy) and a small MLP backbone.
//! - [`bagsynth`]: instance pools, scenario-driven bag assembly and dataset export.
//! - [`countnet`]: the counting network and its two ablation variants.
//! - [`trainkit`]: Adam, the mini-batch loop and split evaluation.
//! - [`metrics`]: instance accuracy, consistency rate, overestimation and summaries.

pub mod bagsynth;
pub mod countnet;
pub mod diffcore;
mod error;
pub mod metrics;
pub mod trainkit;

pub use error::{Error, Result};

/// Version stamped into every file this crate writes.
pub const FORMAT_VERSION: u32 = 1;
