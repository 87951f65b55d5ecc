//! A small trainable-network engine covering the layer set the encoders
//! and decoders need: 2-D convolution (same padding, stride 1), max pooling,
//! inverted dropout, flatten and dense layers with ReLU, linear or SoftMax
//! activations. Everything is `f64` and processed one sample at a time.

mod checkpoint;
mod gradcheck;
mod kernels;
mod loss;
mod network;
mod optim;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
    FORMAT_VERSION,
};
pub use gradcheck::{
    analytic_gradients, gradcheck, gradcheck_against, max_relative_error, numeric_gradient, relative_error,
    GradcheckReport, TensorCheck, FD_STEP,
};
pub use loss::{cross_entropy, cross_entropy_grad, CE_EPSILON};
pub use network::{Activation, Backward, Gradients, LayerSpec, Mode, Network, Tape};
pub use optim::{Adam, AdamConfig};
pub use tensor::{argmax, Tensor};
