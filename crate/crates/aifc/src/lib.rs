//! A desk-scale predictive image codec.
//!
//! An auxiliary coarse network compresses a rough description of the image
//! and decodes it into multi-scale predicted features; the main network
//! codes only the residual between those predictions and the image's own
//! features. Four entropy-coded sub-streams (two hyper-latents under learned
//! factorized priors, two latent residual grids under segment-wise Gaussian
//! conditionals) are framed into a self-describing container that decodes
//! bit-exactly.

pub mod aux_net;
pub mod codec;
pub mod config;
pub mod container;
pub mod entropy;
pub mod error;
pub mod main_net;
pub mod metrics;
pub mod nn;
pub mod ppm;
pub mod range_coder;
pub mod tensor;
pub mod train;

pub(crate) mod bytes;

pub use config::CodecConfig;
pub use error::{CodecError, TensorError};
pub use tensor::Tensor;
