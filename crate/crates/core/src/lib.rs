//! L-MLP blocks and the U-shaped UL-MLP diffusion backbone, built on a small
//! dense tensor engine with reverse-mode differentiation.

pub mod analysis;
pub mod error;
pub mod backbone;
pub mod blocks;
pub mod complexity;
pub mod diffusion;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
