//! Minimal neural-network stack: tensors, 1-D convolution, max pooling,
//! nearest-neighbour upsampling, dense layers, activations, reverse-mode
//! gradients, uniform initializers and Adam.
//!
//! Layers are generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod init;
mod layers;
mod loss;
mod sequential;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_stack, write_stack};
pub use init::{glorot_uniform, he_uniform};
pub use layers::{
    conv1d_backward, conv1d_forward, dense, dense_backward, linear, maxpool1d, relu, sigmoid, upsample1d, Activation, Init,
    Layer,
};
pub use loss::{mse, mse_grad};
pub use sequential::{Grads, Sequential, Trace};
pub use tensor::{concat_features, split_features, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
