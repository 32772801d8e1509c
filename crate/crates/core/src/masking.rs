//! Gradient masks for targeted retraining.
//!
//! Layer `i`'s weights score its input feature maps; a map with
//! `KSE < φ` is redundant, so the layer `i-1` kernel (and batch-norm
//! channel) producing it is marked for retraining. Everything else is
//! frozen. Masks only act on the update path; the forward pass never sees
//! them.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, TgdError};
use crate::kse::{check_report, kse_scores, KseConfig, KseReport};
use crate::model::Network;
use crate::ops::{BatchNormParams, BatchStats, ConvParams};
use crate::optim::{AdamConfig, BnState, ConvState};
use crate::tensor::Tensor;

/// Per-output-channel flags; `true` retrains the channel, `false` freezes it.
/// Serialized as an array of 0/1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask(pub Vec<bool>);

impl ChannelMask {
    pub fn all(len: usize, retrain: bool) -> Self {
        Self(vec![retrain; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn retrains(&self, channel: usize) -> bool {
        self.0[channel]
    }

    pub fn retrained_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl Serialize for ChannelMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&b| b as u8))
    }
}

impl<'de> Deserialize<'de> for ChannelMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask entries must be 0 or 1, got {other}"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ChannelMask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer: usize,
    /// Length = output channels of the convolution.
    pub conv: ChannelMask,
    /// Present on layers with batch norm; same channels as `conv`.
    pub bn: Option<ChannelMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    /// KSE threshold; `None` for masks not derived from scores.
    pub phi: Option<f64>,
    pub last_layer_frozen: bool,
    pub kse: KseConfig,
    /// Hash of the network the masks were derived from.
    pub source_hash: String,
    /// n in TGDⁿ: 1 for the first derivation, +1 per re-mask.
    pub generation: u32,
    pub layers: Vec<LayerMask>,
}

impl MaskSet {
    /// Masks that retrain everything; updates through them are ordinary
    /// unmasked updates.
    pub fn all_trainable(net: &Network<f32>) -> Self {
        Self {
            phi: None,
            last_layer_frozen: false,
            kse: KseConfig::default(),
            source_hash: crate::weights::network_hash(net),
            generation: 0,
            layers: net
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| LayerMask {
                    layer: i,
                    conv: ChannelMask::all(b.conv.out_channels(), true),
                    bn: b.bn.as_ref().map(|bn| ChannelMask::all(bn.channels(), true)),
                })
                .collect(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerMask> {
        self.layers.get(layer).filter(|l| l.layer == layer)
    }

    pub fn retrained_channels(&self) -> usize {
        self.layers.iter().map(|l| l.conv.retrained_count()).sum()
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|l| l.conv.len()).sum()
    }

    /// Number of conv channels whose retrain/freeze flag differs.
    pub fn symmetric_difference(&self, other: &MaskSet) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.conv.0.iter().zip(&b.conv.0).filter(|(x, y)| x != y).count())
            .sum()
    }

    /// Checks the masks line up with `net`'s layers and channel counts.
    pub fn check_against(&self, net: &Network<f32>) -> Result<()> {
        if self.layers.len() != net.blocks.len() {
            return Err(TgdError::InvalidArgument(format!(
                "mask set has {} layers, network has {}",
                self.layers.len(),
                net.blocks.len()
            )));
        }
        for (i, (lm, b)) in self.layers.iter().zip(&net.blocks).enumerate() {
            let bn_len = b.bn.as_ref().map(|bn| bn.channels());
            if lm.layer != i || lm.conv.len() != b.conv.out_channels() || lm.bn.as_ref().map(|m| m.len()) != bn_len {
                return Err(TgdError::LayerShape {
                    layer: i,
                    what: "mask",
                    expected: format!("{} conv channels, bn {:?}", b.conv.out_channels(), bn_len),
                    found: format!("{} conv channels, bn {:?}", lm.conv.len(), lm.bn.as_ref().map(|m| m.len())),
                });
            }
        }
        Ok(())
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if !(phi >= 0.0) {
        return Err(TgdError::InvalidArgument(format!("KSE threshold must be >= 0, got {phi}")));
    }
    Ok(())
}

/// Maps KSE scores of layer `i`'s inputs onto layer `i-1`'s output
/// channels: retrain iff `KSE < phi`. The last layer is fully frozen when
/// `last_layer_frozen`, fully trainable otherwise.
pub fn build_masks(net: &Network<f32>, report: &KseReport, phi: f64, last_layer_frozen: bool) -> Result<MaskSet> {
    check_phi(phi)?;
    check_report(net, report)?;
    let depth = net.blocks.len();
    let mut layers = Vec::with_capacity(depth);
    for (i, block) in net.blocks.iter().enumerate() {
        let conv = if i + 1 == depth {
            ChannelMask::all(block.conv.out_channels(), !last_layer_frozen)
        } else {
            let next = report.layer(i + 1).ok_or_else(|| {
                TgdError::InvalidArgument(format!("KSE report has no scores for layer {}", i + 1))
            })?;
            if next.kse.len() != block.conv.out_channels() {
                return Err(TgdError::LayerShape {
                    layer: i + 1,
                    what: "KSE score count",
                    expected: block.conv.out_channels().to_string(),
                    found: next.kse.len().to_string(),
                });
            }
            ChannelMask(next.kse.iter().map(|&k| k < phi).collect())
        };
        let bn = block.bn.as_ref().map(|_| conv.clone());
        layers.push(LayerMask { layer: i, conv, bn });
    }
    Ok(MaskSet {
        phi: Some(phi),
        last_layer_frozen,
        kse: report.config,
        source_hash: report.source_hash.clone(),
        generation: 1,
        layers,
    })
}

/// Scores the current weights afresh and derives the next generation of
/// masks. Nothing but the generation counter carries over from `previous`.
pub fn remask(net: &Network<f32>, previous: &MaskSet, phi: f64, kse: &KseConfig) -> Result<MaskSet> {
    let report = kse_scores(net, kse)?;
    let mut next = build_masks(net, &report, phi, previous.last_layer_frozen)?;
    next.generation = previous.generation + 1;
    Ok(next)
}

/// Adam step on one convolution. Channels with a zero mask entry keep
/// their kernel slice, bias and optimizer moments untouched; the weight
/// decay term is masked with them.
pub fn masked_update(
    params: &mut ConvParams<f32>,
    weight_grad: &Tensor<f32>,
    bias_grad: Option<&Tensor<f32>>,
    mask: &ChannelMask,
    state: &mut ConvState,
    opt: &AdamConfig,
) -> Result<()> {
    if mask.len() != params.out_channels() {
        return Err(TgdError::shape("masked_update", params.out_channels(), mask.len()));
    }
    if weight_grad.shape() != params.weights.shape() {
        return Err(TgdError::shape(
            "masked_update",
            format!("{:?}", params.weights.shape()),
            format!("{:?}", weight_grad.shape()),
        ));
    }
    state.weights.step(&mut params.weights, weight_grad, |n| mask.retrains(n), opt, true);
    if let (Some(bias), Some(g), Some(slot)) = (params.bias.as_mut(), bias_grad, state.bias.as_mut()) {
        slot.step(bias, g, |n| mask.retrains(n), opt, false);
    }
    Ok(())
}

/// Adam step on gamma/beta plus the running-statistics EMA, all restricted
/// to channels the mask retrains.
pub fn masked_bn_update(
    params: &mut BatchNormParams<f32>,
    gamma_grad: &Tensor<f32>,
    beta_grad: &Tensor<f32>,
    batch_stats: Option<&BatchStats<f32>>,
    mask: &ChannelMask,
    state: &mut BnState,
    opt: &AdamConfig,
) -> Result<()> {
    if mask.len() != params.channels() {
        return Err(TgdError::shape("masked_bn_update", params.channels(), mask.len()));
    }
    state.gamma.step(&mut params.gamma, gamma_grad, |c| mask.retrains(c), opt, false);
    state.beta.step(&mut params.beta, beta_grad, |c| mask.retrains(c), opt, false);
    if let Some(stats) = batch_stats {
        params.update_running_stats(stats, Some(mask.as_slice()));
    }
    Ok(())
}
