//! Time-aware graph convolutional recurrent network for forecasting
//! spatially correlated time series.
//!
//! The crate couples per-time-step learned graph structures (node and time
//! embeddings blended with a periodic discriminant on the current node
//! state) with a graph-convolutional gated recurrent unit, wired into an
//! encoder-decoder and trained end-to-end under a joint forecast-error +
//! time-discrepancy objective.
//!
//! Core tensor math is generic over the scalar type (`f32`/`f64` via
//! [`scalar::Scalar`]); the model, data, and training layers run on the
//! `f64` aliases exported at the crate root.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod gcgru;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod timegraph;
pub mod training;

/// Dense 64-bit tensor used by the model layers.
pub type Tensor = tensor::Tensor<f64>;
/// Compute graph recording 64-bit forward passes.
pub type Graph = autodiff::Graph<f64>;
/// Gradients keyed by parameter id, 64-bit.
pub type GradientMap = autodiff::GradientMap<f64>;

pub use autodiff::{GraphRef, ParamId};
pub use tensor::TensorError;
