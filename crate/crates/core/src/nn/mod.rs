//! Minimal convolutional network engine with hand-written reverse-mode gradients.
//!
//! Everything is generic over [`Scalar`]: networks train in `f32`, while the
//! finite-difference checks in [`gradcheck`] run the same code in `f64`.
//! Tensors are dense NCHW; a "matrix" is simply an `N x C x 1 x 1` tensor.

mod activation;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod linear;
mod loss;
mod network;
mod norm;
mod optim;
mod scalar;
mod tensor;

pub use activation::{elu, elu_backward, relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent, ConvCache, ConvGrads};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{mse_loss, softmax_cross_entropy, softmax_cross_entropy_channels};
pub use network::{Layer, LayerSpec, Network, Param};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNormCache, BatchNormGrads, BN_EPSILON};
pub use optim::{OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use tensor::{Matrix, Tensor4};

/// Index of the maximal channel at every pixel of a single-image tensor, ties
/// going to the lowest channel.
pub fn argmax_channels<T: Scalar>(features: &Tensor4<T>) -> crate::Result<Vec<usize>> {
    let [n, c, h, w] = features.shape();
    if n != 1 || c == 0 {
        return Err(crate::Error::shape(
            "argmax_channels",
            format!("expected 1 x C x H x W with C > 0, got {:?}", features.shape()),
        ));
    }
    let plane = h * w;
    let data = features.data();
    let mut best = vec![0usize; plane];
    let mut best_val: Vec<T> = data[..plane].to_vec();
    for ch in 1..c {
        let row = &data[ch * plane..(ch + 1) * plane];
        for ((b, bv), &v) in best.iter_mut().zip(best_val.iter_mut()).zip(row) {
            if v > *bv {
                *bv = v;
                *b = ch;
            }
        }
    }
    Ok(best)
}
