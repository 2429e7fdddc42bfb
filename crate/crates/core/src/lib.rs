//! JPEG-domain image hiding with invertible multi-range networks.
//!
//! A secret RGB image is hidden inside a baseline JPEG cover by an
//! invertible network operating on frequency maps: a convolutional
//! local-range branch, a transformer global-range branch over sub-band
//! maps, and an adaptive fusion stack. The same network run backwards
//! reveals the secret. Training pits the stego against a frozen surrogate
//! steganalyzer through an angle/norm feature loss.

pub mod error;
pub mod freq;
pub mod image8;
pub mod inn;
pub mod jpeg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod selfcheck;
pub mod surrogate;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{JpegError, PipelineError, TensorError};
pub use scalar::Scalar;

/// Default production precision.
pub type Real = f32;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
