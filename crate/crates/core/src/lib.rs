//! Perceptual image distance built on VGG16 features with ℓ2 pooling.
//!
//! The distance compares per-channel texture statistics (spatial means) and
//! structure statistics (variances and covariance) of the two images'
//! feature maps, combined with learned non-negative weights.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod metric;
pub mod optim;
pub mod par;
pub mod synthesis;
pub mod tensor;

pub use backbone::{FeatureStack, GraphOptions, NetworkGraph, Pooling, VggLayout};
pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor3;
