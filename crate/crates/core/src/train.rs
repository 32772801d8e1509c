//! MSE training with masked Adam: from-scratch noise-adaptive training,
//! TGD fine-tuning and Noise2Noise online adaptation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::kse::{kse_scores, KseConfig};
use crate::masking::{build_masks, masked_bn_update, masked_update, MaskSet};
use crate::model::{build_network, slice_window, Network, NetworkConfig};
use crate::ops::Mode;
use crate::optim::{AdamConfig, AdamState};
use crate::phantom::{derive_seed, TrainPair};
use crate::tensor::Tensor;
use crate::weights::network_hash;

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Scratch,
    TgdFinetune,
    N2nOnline,
}

/// Which slices of each training volume become samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSlices {
    #[default]
    All,
    Centre,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// A batch size at or above the sample count trains full-batch, in
    /// the samples' original order.
    pub batch_size: usize,
    pub seed: u64,
    /// KSE threshold; required by the TGD modes.
    #[serde(default)]
    pub phi: Option<f64>,
    #[serde(default = "yes")]
    pub last_layer_frozen: bool,
    #[serde(default)]
    pub kse: KseConfig,
    #[serde(default)]
    pub sample_slices: SampleSlices,
    /// Start scratch training from a zeroed output layer.
    #[serde(default)]
    pub zero_init_output: bool,
}

impl TrainConfig {
    /// Scratch defaults: lr 1e-3, weight decay 1e-5, 500 epochs.
    pub fn scratch(seed: u64) -> Self {
        Self {
            mode: TrainMode::Scratch,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs: 500,
            batch_size: 16,
            seed,
            phi: None,
            last_layer_frozen: false,
            kse: KseConfig::default(),
            sample_slices: SampleSlices::All,
            zero_init_output: false,
        }
    }

    /// Fine-tune defaults: lr 1e-4, 500 epochs, last layer frozen.
    pub fn tgd_finetune(phi: f64, seed: u64) -> Self {
        Self {
            mode: TrainMode::TgdFinetune,
            learning_rate: 1e-4,
            phi: Some(phi),
            last_layer_frozen: true,
            ..Self::scratch(seed)
        }
    }

    /// Noise2Noise defaults: 150 epochs on top of the fine-tune defaults.
    pub fn n2n_online(phi: f64, seed: u64) -> Self {
        Self {
            mode: TrainMode::N2nOnline,
            epochs: 150,
            ..Self::tgd_finetune(phi, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TgdError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(TgdError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(TgdError::Config("batch_size must be >= 1".into()));
        }
        if self.mode == TrainMode::Scratch && self.epochs == 0 {
            return Err(TgdError::Config("epochs must be >= 1".into()));
        }
        if self.mode != TrainMode::Scratch {
            match self.phi {
                None => return Err(TgdError::Config(format!("phi is required for {:?}", self.mode))),
                Some(p) if !(p >= 0.0) || !p.is_finite() => {
                    return Err(TgdError::Config(format!("phi must be >= 0, got {p}")))
                }
                _ => {}
            }
        }
        self.kse.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }
}

/// One network input window `[C, H, W]` and its target slice `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

fn target_slice(volume: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let [_, h, w] = *volume.shape() else {
        return Err(TgdError::shape("target_slice", "[S, H, W]", format!("{:?}", volume.shape())));
    };
    Tensor::new(vec![1, h, w], volume.data()[s * h * w..(s + 1) * h * w].to_vec())
}

fn volume_samples(input: &Tensor<f32>, target: &Tensor<f32>, input_slices: usize, which: SampleSlices) -> Result<Vec<Sample>> {
    if input.shape() != target.shape() {
        return Err(TgdError::shape("samples", format!("{:?}", input.shape()), format!("{:?}", target.shape())));
    }
    let s_n = input.shape().first().copied().unwrap_or(0);
    let slices: Vec<usize> = match which {
        SampleSlices::All => (0..s_n).collect(),
        SampleSlices::Centre => vec![s_n / 2],
    };
    slices
        .into_iter()
        .map(|s| {
            Ok(Sample {
                input: slice_window(input, s, input_slices)?,
                target: target_slice(target, s)?,
            })
        })
        .collect()
}

/// Noisy-input / high-count-target samples from dataset pairs.
pub fn pair_samples(pairs: &[TrainPair], input_slices: usize, which: SampleSlices) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in pairs {
        out.extend(volume_samples(&p.input, &p.target, input_slices, which)?);
    }
    Ok(out)
}

/// Samples mapping each realization onto the other. The pair is put in a
/// canonical order first, so swapping `r1` and `r2` gives the same list.
pub fn n2n_samples(r1: &Tensor<f32>, r2: &Tensor<f32>, input_slices: usize) -> Result<Vec<Sample>> {
    if r1.shape() != r2.shape() {
        return Err(TgdError::shape("online_n2n", format!("{:?}", r1.shape()), format!("{:?}", r2.shape())));
    }
    let key = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (a, b) = if key(r1) <= key(r2) { (r1, r2) } else { (r2, r1) };
    let mut out = volume_samples(a, b, input_slices, SampleSlices::All)?;
    out.extend(volume_samples(b, a, input_slices, SampleSlices::All)?);
    Ok(out)
}

fn batch_tensors(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let xs: Vec<_> = idx.iter().map(|&i| samples[i].input.clone()).collect();
    let ts: Vec<_> = idx.iter().map(|&i| samples[i].target.clone()).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ts)?))
}

/// Infer-mode MSE of `net` over `samples`.
pub fn evaluate_mse(net: &Network<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TgdError::EmptyDataset);
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (mut se, mut n) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, t) = batch_tensors(samples, chunk)?;
        let y = net.forward(&x, Mode::Infer)?;
        se += y.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
        n += y.numel();
    }
    Ok(se / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches, sample-weighted.
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub steps: usize,
    pub initial_hash: String,
    pub final_hash: String,
    pub initial_train_mse: f64,
    pub final_train_mse: f64,
    pub initial_val_mse: Option<f64>,
    pub final_val_mse: Option<f64>,
    pub retrained_channels: usize,
    pub total_channels: usize,
    pub mask_generation: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

impl TrainRecord {
    /// One JSON object per epoch, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("records serialize"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "summary": self.summary }).to_string());
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub record: TrainRecord,
    pub masks: MaskSet,
}

/// One masked Adam step on a batch; returns the batch loss. Frozen
/// batch-norm channels normalize with their running statistics, as they
/// will at inference.
pub fn train_step(
    net: &mut Network<f32>,
    state: &mut AdamState,
    masks: &MaskSet,
    opt: &AdamConfig,
    x: &Tensor<f32>,
    target: &Tensor<f32>,
) -> Result<f64> {
    let frozen: Vec<Option<Vec<bool>>> = masks
        .layers
        .iter()
        .map(|lm| {
            lm.bn
                .as_ref()
                .filter(|m| m.retrained_count() < m.len())
                .map(|m| m.as_slice().iter().map(|&r| !r).collect())
        })
        .collect();
    let (y, cache) = if frozen.iter().all(Option::is_none) {
        net.forward_cached(x, Mode::Train)?
    } else {
        let fixed: Vec<Option<&[bool]>> = frozen.iter().map(|f| f.as_deref()).collect();
        net.forward_cached_fixed(x, &fixed)?
    };
    if y.shape() != target.shape() {
        return Err(TgdError::shape("train_step", format!("{:?}", y.shape()), format!("{:?}", target.shape())));
    }
    let scale = 2.0 / y.numel() as f32;
    let mut loss = 0.0f64;
    let grad = Tensor::new(
        y.shape().to_vec(),
        y.data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a - b;
                loss += (d as f64) * (d as f64);
                scale * d
            })
            .collect(),
    )?;
    let loss = loss / y.numel() as f64;
    if !loss.is_finite() {
        return Err(TgdError::Diverged(format!("non-finite loss {loss}")));
    }
    let grads = net.backward(&cache, &grad)?;
    for (i, (block, g)) in net.blocks.iter_mut().zip(grads).enumerate() {
        let lm = &masks.layers[i];
        let ls = &mut state.layers[i];
        masked_update(&mut block.conv, &g.weights, g.bias.as_ref(), &lm.conv, &mut ls.conv, opt)?;
        if let (Some(bn), Some(bs), Some(gg), Some(gb)) = (block.bn.as_mut(), ls.bn.as_mut(), g.gamma.as_ref(), g.beta.as_ref()) {
            let mask = lm.bn.as_ref().unwrap_or(&lm.conv);
            masked_bn_update(bn, gg, gb, cache.bn_stats[i].as_ref(), mask, bs, opt)?;
        }
    }
    Ok(loss)
}

fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5a3c, epoch as u64])));
    }
    order
}

/// The shared loop behind every protocol.
pub fn train_masked(
    mut net: Network<f32>,
    config: &TrainConfig,
    masks: MaskSet,
    train: &[Sample],
    val: &[Sample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TgdError::EmptyDataset);
    }
    masks.check_against(&net)?;
    let opt = config.adam();
    let mut state = AdamState::for_network(&net);
    let initial_hash = network_hash(&net);
    let initial_train_mse = evaluate_mse(&net, train)?;
    let initial_val_mse = if val.is_empty() { None } else { Some(evaluate_mse(&net, val)?) };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.batch_size, config.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, t) = batch_tensors(train, chunk)?;
            total += train_step(&mut net, &mut state, &masks, &opt, &x, &t)? * chunk.len() as f64;
            steps += 1;
        }
        let val_mse = if val.is_empty() { None } else { Some(evaluate_mse(&net, val)?) };
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_mse,
        });
    }
    let final_val_mse = if val.is_empty() { None } else { Some(evaluate_mse(&net, val)?) };
    let summary = TrainSummary {
        config: config.clone(),
        train_samples: train.len(),
        val_samples: val.len(),
        steps,
        initial_hash,
        final_hash: network_hash(&net),
        initial_train_mse,
        final_train_mse: evaluate_mse(&net, train)?,
        initial_val_mse,
        final_val_mse,
        retrained_channels: masks.retrained_channels(),
        total_channels: masks.total_channels(),
        mask_generation: masks.generation,
    };
    Ok(TrainOutcome {
        network: net,
        record: TrainRecord { epochs, summary },
        masks,
    })
}

/// Trains every parameter of a freshly initialized network (seeded by
/// `config.seed`).
pub fn train_scratch(net_config: &NetworkConfig, config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    config.validate()?;
    let mut net = build_network(net_config, config.seed)?;
    if config.zero_init_output {
        net.zero_output_layer();
    }
    let masks = MaskSet::all_trainable(&net);
    train_masked(net, config, masks, train, val)
}

/// Trains every parameter of `net`: naive full fine-tuning.
pub fn train_warm_start(net: &Network<f32>, config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    let masks = MaskSet::all_trainable(net);
    train_masked(net.clone(), config, masks, train, val)
}

fn tgd_masks(net: &Network<f32>, config: &TrainConfig, previous: Option<&MaskSet>) -> Result<MaskSet> {
    config.validate()?;
    let phi = config.phi.ok_or_else(|| TgdError::Config("phi is required for TGD training".into()))?;
    let report = kse_scores(net, &config.kse)?;
    let mut masks = build_masks(net, &report, phi, config.last_layer_frozen)?;
    if let Some(prev) = previous {
        masks.generation = prev.generation + 1;
    }
    Ok(masks)
}

/// Retrains only the channels whose outputs score below `config.phi`.
/// Pass the masks of an earlier TGD round as `previous` to count
/// generations.
pub fn finetune_tgd(
    net: &Network<f32>,
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    previous: Option<&MaskSet>,
) -> Result<TrainOutcome> {
    let masks = tgd_masks(net, config, previous)?;
    train_masked(net.clone(), config, masks, train, val)
}

/// TGD fine-tuning on the two equal-count halves of one acquisition,
/// each serving as the other's target.
pub fn online_n2n(
    net: &Network<f32>,
    config: &TrainConfig,
    r1: &Tensor<f32>,
    r2: &Tensor<f32>,
    previous: Option<&MaskSet>,
) -> Result<TrainOutcome> {
    let samples = n2n_samples(r1, r2, net.config.input_slices)?;
    let masks = tgd_masks(net, config, previous)?;
    train_masked(net.clone(), config, masks, &samples, &[])
}
