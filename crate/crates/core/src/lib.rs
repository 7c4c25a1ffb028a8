//! Desk-scale laboratory for multi-task optimization experiments.
//!
//! The crate is built around a reverse-mode autodiff tape ([`tape`]) that
//! supports differentiating through gradients, which is what the
//! representation-saliency regularizers in [`saliency`] and [`alignment`]
//! need. On top of that sit a small convolutional model zoo ([`model`]),
//! classic multi-task weighting and gradient-surgery baselines
//! ([`baselines`]), spectral training-quality diagnostics ([`analysis`]),
//! synthetic benchmark generators ([`benchmarks`]), and a reproducible
//! experiment runner ([`runner`]).
//!
//! All numeric code is generic over the scalar type through [`scalar::Real`];
//! the crate root exports `f64`-concrete aliases, which is what the runner
//! and CLI use.

pub mod alignment;
pub mod analysis;
pub mod baselines;
pub mod benchmarks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layout;
pub mod model;
pub mod numcheck;
pub mod objective;
pub mod plot;
pub mod runner;
pub mod saliency;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default tensor type used by the runner and CLI.
pub type Tensor = tensor::TensorBase<f64>;
/// Default autodiff tape.
pub type Tape = tape::TapeBase<f64>;
