//! Large-kernel convolutional attention (LKCA) and a small ViT-style
//! classifier built around it.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod lkca;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{MacCounter, Scalar, Tensor};
