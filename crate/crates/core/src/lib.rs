//! Desk-scale mechanistic-interpretability lab for cyclic arithmetic.
//!
//! Trains a small gated-MLP transformer on cyclic tasks (months, weekdays,
//! hours, addition) and provides the causal/geometric toolkit to take it
//! apart: interchange interventions, distributed alignment search,
//! cross-task subspace patching, Fourier and circular probes,
//! Fourier-feature steering, and addition-neuron analysis.

pub mod autodiff;
pub mod error;
pub mod fixtures;
pub mod interventions;
pub mod io;
mod kernels;
pub mod linalg;
pub mod neurons;
pub mod pipeline;
pub mod probes;
pub mod report;
pub mod rng;
pub mod model;
pub mod steering;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
