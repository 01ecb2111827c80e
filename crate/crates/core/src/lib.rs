//! Scale-invariant self-supervised monocular depth estimation at desk scale.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode autodiff,
//! pinhole geometry and differentiable view synthesis, camera-zoom data
//! augmentation, the photometric/smoothness training objective, a compact
//! depth + pose network with a dynamic cross-attention head, a procedural
//! scene renderer with exact ground truth, a deterministic trainer, and the
//! evaluation / post-processing harness.

pub mod config;
pub mod czda;
pub mod error;
pub mod evalpp;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
