//! Novel view synthesis by predicted appearance flow.
//!
//! A convolutional encoder–decoder looks at a source view and a viewpoint
//! transformation and predicts, for every target pixel, where in the source to
//! copy from. A differentiable bilinear sampler turns that flow field into the
//! synthesized view. Multiple source views are combined through per-pixel
//! confidence masks.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod network;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{build_network, Network, NetworkConfig, NetworkParams, OutputMode, ViewTransform};
pub use sampler::{bilinear_sample, bilinear_sample_backward, FlowField};
pub use tensor::Tensor;
