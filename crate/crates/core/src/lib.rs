//! Epipolar-constrained multiview attention with ray encodings, a toy
//! multiview diffusion objective, and synthetic raycast scenes to verify
//! them against.

pub mod camera;
pub mod checks;
pub mod diffusion;
pub mod eca;
pub mod encoding;
pub mod error;
pub mod sampling;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
