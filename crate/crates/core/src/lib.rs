//! MR-projection to X-ray-projection image translation at desk scale.
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod netgen;
pub mod projector;
pub mod seeds;
pub mod tensor;
pub mod train;
pub use error::{Error, Result};
