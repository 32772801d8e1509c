//! Kernel sparsity and entropy (KSE) scores of input feature maps.
//!
//! For a convolution with weights `W[n, c]` (`N` output maps, `C` input
//! maps), every input map `c` gets
//!
//! * sparsity `s_c = Σ_n ‖W[n,c]‖₁`,
//! * entropy `e_c` of the k-nearest-neighbour density metrics of the `N`
//!   kernels `W[·,c]` (Euclidean distance over the nine taps),
//! * `KSE_c = sqrt(s̃_c / (1 + α·ẽ_c))` where `s̃`, `ẽ` are min-max
//!   normalized within the layer.
//!
//! Low KSE marks a feature map the next layer barely uses, or reads through
//! near-duplicate kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::model::Network;
use crate::tensor::{Scalar, Tensor};
use crate::weights::network_hash;

const TAPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KseConfig {
    pub alpha: f64,
    /// Clamped to `N - 1` per layer.
    pub k_neighbors: usize,
}

impl Default for KseConfig {
    fn default() -> Self {
        Self { alpha: 1.0, k_neighbors: 5 }
    }
}

impl KseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(TgdError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.k_neighbors < 1 {
            return Err(TgdError::Config("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scores of one convolution layer's input channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKse {
    /// Index of the convolution whose weights were scored.
    pub layer: usize,
    pub sparsity_raw: Vec<f64>,
    pub entropy_raw: Vec<f64>,
    pub sparsity: Vec<f64>,
    pub entropy: Vec<f64>,
    pub kse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KseReport {
    pub config: KseConfig,
    /// [`network_hash`] of the scored network.
    pub source_hash: String,
    /// One entry per convolution whose inputs are feature maps (layers
    /// `1..depth`); the image slices feeding layer 0 are not scored.
    pub layers: Vec<LayerKse>,
}

impl KseReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerKse> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

fn dims<T: Scalar>(weights: &Tensor<T>) -> Result<(usize, usize)> {
    match *weights.shape() {
        [n, c, 3, 3] => Ok((n, c)),
        _ => Err(TgdError::shape("kse", "[N, C, 3, 3]", format!("{:?}", weights.shape()))),
    }
}

fn check_channel(c: usize, chans: usize) -> Result<()> {
    if c >= chans {
        return Err(TgdError::InvalidArgument(format!("input channel {c} out of range for {chans} channels")));
    }
    Ok(())
}

fn kernel<T: Scalar>(weights: &Tensor<T>, chans: usize, n: usize, c: usize) -> &[T] {
    let off = (n * chans + c) * TAPS;
    &weights.data()[off..off + TAPS]
}

/// `s_c = Σ_n Σ_taps |W[n, c]|`.
pub fn kernel_sparsity<T: Scalar>(weights: &Tensor<T>, c: usize) -> Result<f64> {
    let (n_out, chans) = dims(weights)?;
    check_channel(c, chans)?;
    Ok((0..n_out)
        .map(|n| kernel(weights, chans, n, c).iter().map(|&w| w.to_f64().abs()).sum::<f64>())
        .sum())
}

/// `dm_i = Σ_j A[i, j]` where `A[i, j]` is the Euclidean distance between
/// kernels `W[i, c]` and `W[j, c]` if `j` is one of the `k` nearest
/// neighbours of `i` (ties to the lower index), else zero.
pub fn density_metric<T: Scalar>(weights: &Tensor<T>, c: usize, k_neighbors: usize) -> Result<Vec<f64>> {
    let (n_out, chans) = dims(weights)?;
    check_channel(c, chans)?;
    let k = k_neighbors.min(n_out.saturating_sub(1));
    let kernels: Vec<&[T]> = (0..n_out).map(|n| kernel(weights, chans, n, c)).collect();
    let dist = |a: &[T], b: &[T]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x.to_f64() - y.to_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(n_out);
    Ok((0..n_out)
        .map(|i| {
            row.clear();
            row.extend((0..n_out).filter(|&j| j != i).map(|j| (dist(kernels[i], kernels[j]), j)));
            row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            row[..k].iter().map(|&(d, _)| d).sum()
        })
        .collect())
}

/// Shannon entropy (bits) of the normalized density metrics. A zero total
/// (identical kernels) is treated as the uniform distribution.
pub fn kernel_entropy<T: Scalar>(weights: &Tensor<T>, c: usize, config: &KseConfig) -> Result<f64> {
    let dm = density_metric(weights, c, config.k_neighbors)?;
    Ok(entropy_of(&dm))
}

fn entropy_of(dm: &[f64]) -> f64 {
    let n = dm.len();
    if n <= 1 {
        return 0.0;
    }
    let total: f64 = dm.iter().sum();
    if total <= 0.0 {
        return (n as f64).log2();
    }
    -dm.iter()
        .filter(|&&d| d > 0.0)
        .map(|&d| {
            let p = d / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Maps to [0, 1]; a constant sequence maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Raw and normalized scores for every input channel of one layer.
pub fn layer_kse<T: Scalar>(weights: &Tensor<T>, layer: usize, config: &KseConfig) -> Result<LayerKse> {
    config.validate()?;
    let (_, chans) = dims(weights)?;
    let sparsity_raw = (0..chans).map(|c| kernel_sparsity(weights, c)).collect::<Result<Vec<_>>>()?;
    let entropy_raw = (0..chans)
        .map(|c| kernel_entropy(weights, c, config))
        .collect::<Result<Vec<_>>>()?;
    let sparsity = min_max_normalize(&sparsity_raw);
    let entropy = min_max_normalize(&entropy_raw);
    let kse = sparsity
        .iter()
        .zip(&entropy)
        .map(|(&s, &e)| (s / (1.0 + config.alpha * e)).sqrt())
        .collect();
    Ok(LayerKse {
        layer,
        sparsity_raw,
        entropy_raw,
        sparsity,
        entropy,
        kse,
    })
}

pub fn kse_scores(net: &Network<f32>, config: &KseConfig) -> Result<KseReport> {
    if net.blocks.len() < 2 {
        return Err(TgdError::InvalidArgument("need at least two conv layers to score feature maps".into()));
    }
    let layers = net
        .blocks
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, b)| layer_kse(&b.conv.weights, i, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(KseReport {
        config: *config,
        source_hash: network_hash(net),
        layers,
    })
}

pub(crate) fn check_report(net: &Network<f32>, report: &KseReport) -> Result<()> {
    let found = network_hash(net);
    if report.source_hash != found {
        return Err(TgdError::HashMismatch {
            expected: report.source_hash.clone(),
            found,
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DropOutcome {
    pub network: Network<f32>,
    /// Weights belonging to dropped kernels.
    pub dropped_params: usize,
    /// All trainable parameters of the network.
    pub total_params: usize,
}

impl DropOutcome {
    pub fn fraction(&self) -> f64 {
        self.dropped_params as f64 / self.total_params as f64
    }
}

/// Zeroes, in every scored layer, the kernels `W[·, c]` that read a feature
/// map with `KSE_c < phi`. Any `phi > 1` drops every scored kernel.
pub fn drop_kernels(net: &Network<f32>, report: &KseReport, phi: f64) -> Result<DropOutcome> {
    if !(phi >= 0.0) {
        return Err(TgdError::InvalidArgument(format!("threshold must be >= 0, got {phi}")));
    }
    check_report(net, report)?;
    let mut out = net.clone();
    let mut dropped = 0;
    for lk in &report.layers {
        let conv = &mut out.blocks[lk.layer].conv;
        let (n_out, chans) = (conv.out_channels(), conv.in_channels());
        let w = conv.weights.data_mut();
        for (c, &score) in lk.kse.iter().enumerate() {
            if score < phi {
                for n in 0..n_out {
                    let off = (n * chans + c) * TAPS;
                    w[off..off + TAPS].fill(0.0);
                }
                dropped += n_out * TAPS;
            }
        }
    }
    Ok(DropOutcome {
        network: out,
        dropped_params: dropped,
        total_params: net.param_count(),
    })
}
