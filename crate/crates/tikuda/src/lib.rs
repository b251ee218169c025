//! TikUDA: Tikhonov-regularized unsupervised domain adaptation for regression,
//! with a spatial-temporal (GRU + graph attention) feature extractor, baseline
//! alignment losses (cosine/DARE-GRAM/CORAL/MMD), a data pipeline, and a
//! runtime benchmark harness.
//!
//! The numeric core is generic over the scalar type; `f64` is the working
//! precision for training and evaluation, `f32` is available for the
//! large-dimension benchmarks.

pub mod scalar;
#[macro_use]
pub mod matrix;
pub mod linalg;
pub mod autodiff;
pub mod alignment;
pub mod stgnn;
pub mod data;
pub mod trainer;
pub mod config;
pub mod bench;

pub use matrix::Matrix;
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;
/// f64 matrix, the default numeric carrier.
pub type Mat64 = Matrix<f64>;
/// f32 matrix, used by the large-dimension benchmark path.
pub type Mat32 = Matrix<f32>;
