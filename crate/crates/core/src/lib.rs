//! Physics-informed prediction of scalar transport on 2-D grids.
//!
//! The numeric core is generic over [`Scalar`]; training runs in `f32` and
//! the verification suites in `f64`. Aliases for both are exported below.

// Range checks are written as negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod scalar;
pub mod sim;
pub mod stencil;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ScalarField32 = field::ScalarField<f32>;
pub type ScalarField64 = field::ScalarField<f64>;
pub type VectorField32 = field::VectorField2<f32>;
pub type VectorField64 = field::VectorField2<f64>;
pub type Record32 = sim::SequenceRecord<f32>;
pub type Record64 = sim::SequenceRecord<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
