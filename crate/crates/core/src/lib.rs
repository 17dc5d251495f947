//! Single-stage face detection with scale-histogram proposals and
//! soft-argmax landmark decoding.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod keypoint;
pub mod model;
pub mod pipeline;
pub mod scale;
pub mod tensor;

pub use error::{Error, Result};
