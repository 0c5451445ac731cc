//! Fast word error rate estimation.
//!
//! The estimator maps a spoken utterance and its ASR hypothesis, both given as
//! precomputed frame/token embedding sequences, to a WER estimate in `(0, 1)`:
//! each tower is pooled to a fixed-length vector, the two vectors are
//! concatenated, and a small MLP with a sigmoid output regresses the WER.
//!
//! The numeric core ([`tensor`], [`model`], [`training`], [`evaluate`],
//! [`bench`]) is generic over [`Scalar`], implemented for `f32` and `f64`.
//! Training and gradient checks use `f64`; the aliases below name the common
//! instantiations.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod wer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense matrix in double precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Dense matrix in single precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Autodiff tape in double precision.
pub type Tape64 = tensor::Tape<f64>;
/// Estimator with double-precision parameters (training default).
pub type Estimator = model::EstimatorModel<f64>;
/// Estimator with single-precision parameters (inference/benchmarking).
pub type Estimator32 = model::EstimatorModel<f32>;
/// Adam optimiser state for double-precision parameters.
pub type Adam64 = training::AdamState<f64>;
