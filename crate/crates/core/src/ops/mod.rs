//! Forward and backward passes for the fixed layer set of the denoiser:
//! 3×3 convolution, batch normalization and ReLU.

pub mod batchnorm;
pub mod conv;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub use batchnorm::{batchnorm_backward, batchnorm_forward, batchnorm_forward_fixed, BatchNormGrads, BatchNormParams, BatchStats};
pub use conv::{conv2d_backward, conv2d_backward_opt, conv2d_forward, ConvGrads, ConvParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu_backward: shapes must agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::new(vec![2], vec![-1.0f32, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![5.0f32, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 5.0]);
    }
}
