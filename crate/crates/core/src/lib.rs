//! Graph reasoning directly on CNN feature maps.
//!
//! The crate provides a small dense tensor type with a reverse-mode tape,
//! the graph-reasoning block built on a data-dependent normalized Laplacian
//! (with a quadratic oracle for verification), its spatial-pyramid
//! composition, an analytic cost model, and a binary tensor format.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for callers that do not care.

pub mod costmodel;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod layer;
pub mod ops;
pub mod pyramid;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::{AttentionMode, SimilarityFactors, SpyGRParams};
pub use pyramid::PyramidConfig;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = SpyGRParams<f32>;
pub type Params64 = SpyGRParams<f64>;
pub type Pyramid32 = PyramidConfig<f32>;
pub type Pyramid64 = PyramidConfig<f64>;
pub type Tape64 = Tape<f64>;
