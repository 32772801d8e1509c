//! 3×3 convolution with zero padding of one pixel ("same" output size).

use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams<T = f32> {
    /// `[N_out, C_in, 3, 3]`
    pub weights: Tensor<T>,
    /// `[N_out]`; absent on convolutions that feed a batch norm.
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    /// Empty (`None`) when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 4 || shape[2] != KERNEL || shape[3] != KERNEL {
            return Err(TgdError::shape("ConvParams", "[N, C, 3, 3]", format!("{shape:?}")));
        }
        if let Some(b) = &bias {
            if b.shape() != [shape[0]] {
                return Err(TgdError::shape(
                    "ConvParams bias",
                    format!("[{}]", shape[0]),
                    format!("{:?}", b.shape()),
                ));
            }
        }
        Ok(Self { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    /// Flat weights of the 3×3 kernel `W[n, c]`.
    pub fn kernel(&self, n: usize, c: usize) -> &[T] {
        let start = (n * self.in_channels() + c) * TAPS;
        &self.weights.data()[start..start + TAPS]
    }
}

/// Valid destination range along one axis for a tap offset `d ∈ {-1, 0, 1}`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { len - 1 } else { len };
    (lo, hi.max(lo))
}

fn check_input<T: Scalar>(op: &'static str, input: &Tensor<T>, params: &ConvParams<T>) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = input.dims4(op)?;
    if c != params.in_channels() {
        return Err(TgdError::shape(
            op,
            format!("{} input channels", params.in_channels()),
            format!("{c} (input shape {:?})", input.shape()),
        ));
    }
    Ok((b, c, h, w))
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (batch, chans, h, w) = check_input("conv2d_forward", input, params)?;
    let n_out = params.out_channels();
    let hw = h * w;
    let x = input.data();
    let wt = params.weights.data();
    let mut out = vec![T::zero(); batch * n_out * hw];

    for b in 0..batch {
        for n in 0..n_out {
            let plane = &mut out[(b * n_out + n) * hw..(b * n_out + n + 1) * hw];
            if let Some(bias) = &params.bias {
                plane.fill(bias[n]);
            }
            for c in 0..chans {
                let src = &x[(b * chans + c) * hw..(b * chans + c + 1) * hw];
                let kern = &wt[(n * chans + c) * TAPS..(n * chans + c + 1) * TAPS];
                for (tap, &k) in kern.iter().enumerate() {
                    let dy = (tap / KERNEL) as isize - 1;
                    let dx = (tap % KERNEL) as isize - 1;
                    let (y0, y1) = tap_range(h, dy);
                    let (x0, x1) = tap_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o = *o + k * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, n_out, h, w], out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_opt(input, params, grad_out, true)
}

/// Backward pass; `need_input` false skips the input gradient (first layer).
pub fn conv2d_backward_opt<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (batch, chans, h, w) = check_input("conv2d_backward", input, params)?;
    let n_out = params.out_channels();
    if grad_out.shape() != [batch, n_out, h, w] {
        return Err(TgdError::shape(
            "conv2d_backward",
            format!("grad_out {:?}", [batch, n_out, h, w]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let hw = h * w;
    let x = input.data();
    let g = grad_out.data();
    let wt = params.weights.data();

    let mut gw = vec![T::zero(); wt.len()];
    let mut gx = if need_input { vec![T::zero(); x.len()] } else { Vec::new() };

    for b in 0..batch {
        for n in 0..n_out {
            let gplane = &g[(b * n_out + n) * hw..(b * n_out + n + 1) * hw];
            for c in 0..chans {
                let xoff = (b * chans + c) * hw;
                let src = &x[xoff..xoff + hw];
                let koff = (n * chans + c) * TAPS;
                for tap in 0..TAPS {
                    let dy = (tap / KERNEL) as isize - 1;
                    let dx = (tap % KERNEL) as isize - 1;
                    let (y0, y1) = tap_range(h, dy);
                    let (x0, x1) = tap_range(w, dx);
                    let sx0 = (x0 as isize + dx) as usize;
                    let span = x1 - x0;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let xrow = &src[sy * w + sx0..sy * w + sx0 + span];
                        let mut row_acc = T::zero();
                        for (&a, &v) in grow.iter().zip(xrow) {
                            row_acc = row_acc + a * v;
                        }
                        acc = acc + row_acc;
                    }
                    gw[koff + tap] = gw[koff + tap] + acc;

                    if need_input {
                        let k = wt[koff + tap];
                        let dst_plane = &mut gx[xoff..xoff + hw];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let dst = &mut dst_plane[sy * w + sx0..sy * w + sx0 + span];
                            for (o, &a) in dst.iter_mut().zip(grow) {
                                *o = *o + k * a;
                            }
                        }
                    }
                }
            }
        }
    }

    let bias = params.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); n_out];
        for b in 0..batch {
            for (n, acc) in gb.iter_mut().enumerate() {
                let plane = &g[(b * n_out + n) * hw..(b * n_out + n + 1) * hw];
                *acc = *acc + plane.iter().copied().sum::<T>();
            }
        }
        Tensor::new(vec![n_out], gb).expect("bias gradient shape")
    });

    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(input.shape().to_vec(), gx)?)
        } else {
            None
        },
        weights: Tensor::new(params.weights.shape().to_vec(), gw)?,
        bias,
    })
}
