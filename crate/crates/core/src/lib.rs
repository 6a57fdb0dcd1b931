//! Stochastic-gate structured sparsification of frozen weight matrices,
//! optionally combined with low-rank adapters, on a toy transformer encoder.
//!
//! The core math (tensors, reverse-mode autodiff, gates, adapter layers,
//! encoder) is generic over the scalar type through [`num::Real`]; the
//! training loop, data handling, checkpoints and CLI work on the `f64`
//! aliases exported at the crate root.

pub mod adapters;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod gates;
pub mod num;
pub mod tensor;
pub mod training;
pub mod transformer;

mod error;

pub use error::{Error, Result};

/// Default scalar type for the full pipeline.
pub type Scalar = f64;

pub type Tensor = tensor::Tensor<Scalar>;
pub type Tape = autodiff::Tape<Scalar>;
pub type GateVector = gates::GateVector<Scalar>;
pub type AdapterLinear = adapters::AdapterLinear<Scalar>;
pub type PrunedLinear = adapters::PrunedLinear<Scalar>;
pub type Model = transformer::Model<Scalar>;
pub type PrunedModel = transformer::PrunedModel<Scalar>;

