//! The 2.5-D residual denoiser: `depth` 3×3 convolutions, the first followed
//! by ReLU, the interior ones by batch norm + ReLU, the last one bare, with
//! the centre input slice added back at the end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_fixed, conv2d_backward_opt, conv2d_forward, relu_backward, relu_forward,
    BatchNormParams, BatchStats, ConvParams, Mode,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub channels: usize,
    pub input_slices: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            channels: 64,
            input_slices: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(TgdError::Config(format!("depth must be >= 3, got {}", self.depth)));
        }
        if self.channels < 1 {
            return Err(TgdError::Config("channels must be >= 1".into()));
        }
        if self.input_slices % 2 == 0 {
            return Err(TgdError::Config(format!("input_slices must be odd, got {}", self.input_slices)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count: conv weights, conv biases on
    /// the first and last layer, gamma/beta on the interior layers.
    pub fn param_count(&self) -> usize {
        let (c, s, d) = (self.channels, self.input_slices, self.depth);
        let first = c * s * 9 + c;
        let interior = (d - 2) * (c * c * 9 + 2 * c);
        let last = c * 9 + 1;
        first + interior + last
    }

    pub fn center_slice(&self) -> usize {
        self.input_slices / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock<T = f32> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network<T = f32> {
    pub config: NetworkConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub version_tag: String,
}

/// Activations a train-mode backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    block_inputs: Vec<Tensor<T>>,
    pre_relu: Vec<Option<Tensor<T>>>,
    /// Train-mode batch statistics per block (None for blocks without BN).
    pub bn_stats: Vec<Option<BatchStats<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.depth;
    let mut blocks = Vec::with_capacity(d);
    for i in 0..d {
        let c_in = if i == 0 { config.input_slices } else { config.channels };
        let n_out = if i == d - 1 { 1 } else { config.channels };
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("He std is finite and positive");
        let weights = Tensor::from_fn(&[n_out, c_in, 3, 3], |_| normal.sample(&mut rng) as f32);
        let interior = i > 0 && i < d - 1;
        let bias = (!interior).then(|| Tensor::zeros(&[n_out]));
        blocks.push(ConvBlock {
            conv: ConvParams::new(weights, bias)?,
            bn: interior.then(|| BatchNormParams::identity(n_out)),
            relu: i < d - 1,
        });
    }
    Ok(Network {
        config: *config,
        blocks,
        version_tag: format!("dncnn-d{}-c{}-seed{}", config.depth, config.channels, seed),
    })
}

impl<T: Scalar> Network<T> {
    /// Checks the block list against the architecture the config describes.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.depth;
        if self.blocks.len() != d {
            return Err(TgdError::LayerShape {
                layer: self.blocks.len().min(d),
                what: "layer count",
                expected: d.to_string(),
                found: self.blocks.len().to_string(),
            });
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let c_in = if i == 0 { self.config.input_slices } else { self.config.channels };
            let n_out = if i == d - 1 { 1 } else { self.config.channels };
            let want = [n_out, c_in, 3, 3];
            if b.conv.weights.shape() != want {
                return Err(TgdError::LayerShape {
                    layer: i,
                    what: "conv weights",
                    expected: format!("{want:?}"),
                    found: format!("{:?}", b.conv.weights.shape()),
                });
            }
            let interior = i > 0 && i < d - 1;
            if b.bn.is_some() != interior || b.conv.bias.is_some() == interior || b.relu != (i < d - 1) {
                return Err(TgdError::LayerShape {
                    layer: i,
                    what: "layer kind",
                    expected: if interior { "conv+bn+relu" } else if i == 0 { "conv+bias+relu" } else { "conv+bias" }.into(),
                    found: format!("bias={} bn={} relu={}", b.conv.bias.is_some(), b.bn.is_some(), b.relu),
                });
            }
            if let Some(bn) = &b.bn {
                if bn.channels() != n_out {
                    return Err(TgdError::LayerShape {
                        layer: i,
                        what: "batch norm channels",
                        expected: n_out.to_string(),
                        found: bn.channels().to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Zeroes the final convolution, making the network the identity on
    /// the centre slice.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.blocks.last_mut() {
            last.conv.weights.data_mut().fill(T::zero());
            if let Some(b) = &mut last.conv.bias {
                b.data_mut().fill(T::zero());
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv.param_count() + b.bn.as_ref().map_or(0, |bn| 2 * bn.channels()))
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cast_bn = |bn: &BatchNormParams<T>| BatchNormParams {
            gamma: bn.gamma.cast(),
            beta: bn.beta.cast(),
            running_mean: bn.running_mean.cast(),
            running_var: bn.running_var.cast(),
            momentum: U::from_f64(bn.momentum.to_f64()),
            epsilon: U::from_f64(bn.epsilon.to_f64()),
        };
        Network {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: ConvParams {
                        weights: b.conv.weights.cast(),
                        bias: b.conv.bias.as_ref().map(|t| t.cast()),
                    },
                    bn: b.bn.as_ref().map(cast_bn),
                    relu: b.relu,
                })
                .collect(),
            version_tag: self.version_tag.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4("Network::forward")?;
        if c != self.config.input_slices {
            return Err(TgdError::shape(
                "Network::forward",
                format!("{} input slices", self.config.input_slices),
                format!("{c} channels (input shape {:?})", x.shape()),
            ));
        }
        if h < 3 || w < 3 {
            return Err(TgdError::shape("Network::forward", "H, W >= 3", format!("{h}x{w}")));
        }
        Ok((b, h, w))
    }

    fn add_center_slice(&self, x: &Tensor<T>, mut out: Tensor<T>) -> Result<Tensor<T>> {
        let (b, h, w) = self.check_input(x)?;
        let (s, hw) = (self.config.input_slices, h * w);
        let center = self.config.center_slice();
        let o = out.data_mut();
        for bi in 0..b {
            let src = &x.data()[(bi * s + center) * hw..(bi * s + center + 1) * hw];
            for (dst, &v) in o[bi * hw..(bi + 1) * hw].iter_mut().zip(src) {
                *dst = *dst + v;
            }
        }
        Ok(out)
    }

    /// `[B, input_slices, H, W]` → `[B, 1, H, W]`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = conv2d_forward(&h, &block.conv)?;
            if let Some(bn) = &block.bn {
                h = batchnorm_forward(&h, bn, mode)?.0;
            }
            if block.relu {
                h = relu_forward(&h);
            }
        }
        self.add_center_slice(x, h)
    }

    pub fn forward_cached(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.forward_cached_impl(x, mode, None)
    }

    /// Train-mode forward where, per block, the batch-norm channels flagged
    /// in `fixed_bn[i]` normalize with their running statistics.
    pub fn forward_cached_fixed(&self, x: &Tensor<T>, fixed_bn: &[Option<&[bool]>]) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if fixed_bn.len() != self.blocks.len() {
            return Err(TgdError::shape("forward_cached_fixed", self.blocks.len(), fixed_bn.len()));
        }
        self.forward_cached_impl(x, Mode::Train, Some(fixed_bn))
    }

    fn forward_cached_impl(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        fixed_bn: Option<&[Option<&[bool]>]>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let n = self.blocks.len();
        let mut cache = ForwardCache {
            block_inputs: Vec::with_capacity(n),
            pre_relu: Vec::with_capacity(n),
            bn_stats: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let mut z = conv2d_forward(&h, &block.conv)?;
            cache.block_inputs.push(h);
            let mut stats = None;
            if let Some(bn) = &block.bn {
                let fixed = fixed_bn.and_then(|f| f[i]);
                let (y, s) = match fixed {
                    Some(f) => batchnorm_forward_fixed(&z, bn, f).map(|(y, s)| (y, Some(s)))?,
                    None => batchnorm_forward(&z, bn, mode)?,
                };
                z = y;
                stats = s;
            }
            cache.bn_stats.push(stats);
            if block.relu {
                h = relu_forward(&z);
                cache.pre_relu.push(Some(z));
            } else {
                h = z;
                cache.pre_relu.push(None);
            }
        }
        Ok((self.add_center_slice(x, h)?, cache))
    }

    /// Parameter gradients given dL/d(output). Requires a train-mode cache
    /// when the network has batch norm layers.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<Vec<BlockGrads<T>>> {
        let mut grads: Vec<Option<BlockGrads<T>>> = vec![None; self.blocks.len()];
        let mut g = grad_out.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            if let Some(pre) = &cache.pre_relu[i] {
                g = relu_backward(pre, &g);
            }
            let (mut gamma, mut beta) = (None, None);
            if let Some(bn) = &block.bn {
                let stats = cache.bn_stats[i].as_ref().ok_or_else(|| {
                    TgdError::InvalidArgument(format!("layer {i}: backward needs a train-mode forward"))
                })?;
                let bg = batchnorm_backward(bn, stats, &g)?;
                g = bg.input;
                gamma = Some(bg.gamma);
                beta = Some(bg.beta);
            }
            let cg = conv2d_backward_opt(&cache.block_inputs[i], &block.conv, &g, i > 0)?;
            grads[i] = Some(BlockGrads {
                weights: cg.weights,
                bias: cg.bias,
                gamma,
                beta,
            });
            if let Some(gi) = cg.input {
                g = gi;
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every block visited")).collect())
    }
}

/// The `slices`-wide window of `stack` (`[S, H, W]`) centred on `center`,
/// replicating the edge slice past either end of the volume.
pub fn slice_window<T: Scalar>(stack: &Tensor<T>, center: usize, slices: usize) -> Result<Tensor<T>> {
    let [s, h, w] = *stack.shape() else {
        return Err(TgdError::shape("slice_window", "[S, H, W]", format!("{:?}", stack.shape())));
    };
    if center >= s {
        return Err(TgdError::InvalidArgument(format!("slice {center} out of range for {s} slices")));
    }
    let half = (slices / 2) as isize;
    let hw = h * w;
    let mut data = Vec::with_capacity(slices * hw);
    for k in -half..=half {
        let src = (center as isize + k).clamp(0, s as isize - 1) as usize;
        data.extend_from_slice(&stack.data()[src * hw..(src + 1) * hw]);
    }
    Tensor::new(vec![slices, h, w], data)
}

/// Denoises every slice of a `[S, H, W]` volume in infer mode.
pub fn denoise_volume(net: &Network<f32>, stack: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [s, h, w] = *stack.shape() else {
        return Err(TgdError::shape("denoise_volume", "[S, H, W]", format!("{:?}", stack.shape())));
    };
    let windows = (0..s)
        .map(|i| slice_window(stack, i, net.config.input_slices))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::stack(&windows)?;
    net.forward(&x, Mode::Infer)?.reshape(&[s, h, w])
}
