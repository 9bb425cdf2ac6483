//! Image segmentation by bottom-up hierarchical pixel clustering.
//!
//! A small convolutional backbone emits feature maps around each of its
//! downsampling layers; an attention-style clustering module turns every
//! (pre, post) pair into a row-stochastic assignment matrix from fine pixels
//! to coarse prototypes. A segmentation head predicts masks on the coarsest
//! grid only, and full-resolution masks are decoded by multiplying the coarse
//! masks through the chain of assignment matrices, with no learned upsampler.
//! Every intermediate clustering is a first-class, inspectable object that
//! can be visualized and scored against ground truth.

pub mod backbone;
pub mod clustering;
pub mod config;
pub mod data;
pub mod decode;
pub mod eval;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod runner;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};
