//! Few-shot video action recognition with searched multi-layer feature fusion,
//! long-term and short-term temporal modeling, and tuple cross-attention
//! prototype matching, built on a small reverse-mode autodiff engine.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what training, the
//! gradient checks and the file formats use.

pub mod backbone;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod ffas;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod ltmm;
pub mod matcher;
pub mod model;
pub mod params;
pub mod scalar;
pub mod stmm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::Var;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type Gradients = graph::Gradients<f64>;
