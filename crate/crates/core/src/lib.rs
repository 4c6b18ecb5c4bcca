//! Scale-equivariant steerable networks.
//!
//! Scale convolutions on the discrete scale-translation group, built from a
//! fixed multi-scale Hermite-Gaussian basis so that every layer reduces to a
//! single 2D convolution. The crate also carries the verification harness
//! (brute-force group-convolution oracle, equivariance error, finite-difference
//! gradient checks), a tape-based autodiff sufficient to train small
//! classifiers, an MNIST-scale generator and a CRC-checked tensor container.

pub mod autodiff;
pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod group;
pub mod image;
pub mod model;
pub mod pool;
pub mod scaleconv;
pub mod tensor;
pub mod timing;

pub use basis::{assemble_kernel, BasisSpec, SteerableBasis};
pub use checkpoint::{Container, TensorData};
pub use config::RunConfig;
pub use conv::{conv2d, ChannelLayout, Padding};
pub use error::{Error, Result};
pub use group::{GroupElement, ScaleGrid, ScaleTranslationGroup, DEFAULT_BASE};
pub use scaleconv::{conv_h_h, conv_h_h_interscale, conv_t_h, FeatureMapH, Nonlinearity, ScaleConvLayer};
pub use tensor::{Scalar, Tensor};
