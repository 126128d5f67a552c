//! A small, deterministic, single-threaded CPU layer engine.
//!
//! Only what the slice detectors need: stride-1 "same" convolutions (2D, and
//! 1D as a `k x 1` kernel on width-1 tensors), batch normalisation, leaky ReLU,
//! sigmoid, max-pooling, global horizontal max-pooling, nearest upsampling,
//! dropout, dense layers and Adam. Layers expose explicit forward/backward
//! passes; composite networks wire them up by hand.

mod activation;
mod conv;
mod dense;
mod dropout;
mod gemm;
mod layer;
mod norm;
mod optim;
mod pool;
pub mod state;

pub use activation::{sigmoid, LeakyRelu, Sigmoid};
pub use conv::Conv2d;
pub use dense::{Dense, Flatten};
pub use dropout::Dropout;
pub use layer::{parameter_count, Layer, Param, Sequential, Tensor, TrainContext};
pub use norm::BatchNorm;
pub use optim::{zero_grad, Adam};
pub use pool::{GlobalHorizontalMaxPool, MaxPool, Upsample};

use ndarray::{Array4, Axis};

/// Concatenate two tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("concat requires matching batch and spatial dims")
        .as_standard_layout()
        .into_owned()
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (a, b) = g.view().split_at(Axis(1), first);
    (a.as_standard_layout().into_owned(), b.as_standard_layout().into_owned())
}

/// Zero tensor helper.
pub fn zeros(shape: (usize, usize, usize, usize)) -> Tensor {
    Array4::zeros(shape)
}
