//! Attention Xception UNet (AXUNet) for multi-region brain tumor
//! segmentation, built on a small reverse-mode autodiff tensor library.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
