//! Continual learning with functional regularisation.
//!
//! A shared ReLU feature network is trained task after task. Each finished task
//! is compressed into a sparse Gaussian-process summary over a handful of
//! inducing inputs, and the KL divergence between each stored summary and the
//! GP prior induced by the current features regularises all later training.

pub mod boundary;
pub mod engine;
pub mod error;
pub mod feature_net;
pub mod gradcheck;
pub mod inducing;
pub mod kernel;
pub mod likelihood;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod posterior;
pub mod scalar;
pub mod summary;

pub use error::{FrclError, Result};
pub use scalar::Scalar;

/// Double-precision instantiations of the main generic types.
pub type Matrix = numerics::Matrix<f64>;
pub type FeatureNet = feature_net::FeatureNet<f64>;
pub type WeightPosterior = posterior::WeightPosterior<f64>;
pub type TaskSummary = summary::TaskSummary<f64>;
pub type Engine = engine::Engine<f64>;
