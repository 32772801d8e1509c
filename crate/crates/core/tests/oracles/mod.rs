//! Brute-force reference implementations and finite-difference gradient
//! checks, written straight from the formulas and kept independent of the
//! library's loops.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgd_core::model::Network;
use tgd_core::ops::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_fixed, conv2d_backward, conv2d_forward, relu_backward,
    relu_forward, BatchNormParams, ConvParams, Mode,
};
use tgd_core::{build_network, NetworkConfig, Tensor};

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// KSE quantities of every input channel, from the defining sums.
#[derive(Debug)]
pub struct BruteKse {
    pub sparsity: Vec<f64>,
    pub density: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    pub kse: Vec<f64>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::MAX, f64::min);
    let hi = v.iter().cloned().fold(f64::MIN, f64::max);
    if hi == lo {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    }
}

/// `w` is `[n_out, chans, 3, 3]` row-major.
pub fn brute_kse(w: &[f64], n_out: usize, chans: usize, alpha: f64, k: usize) -> BruteKse {
    let at = |n: usize, c: usize, t: usize| w[(n * chans + c) * 9 + t];
    let k = k.min(n_out - 1);
    let mut sparsity = Vec::new();
    let mut density = Vec::new();
    let mut entropy = Vec::new();
    for c in 0..chans {
        let mut s = 0.0;
        for n in 0..n_out {
            for t in 0..9 {
                s += at(n, c, t).abs();
            }
        }
        sparsity.push(s);

        let mut a = vec![vec![0.0; n_out]; n_out];
        for i in 0..n_out {
            let mut d: Vec<Option<f64>> = (0..n_out)
                .map(|j| (j != i).then(|| (0..9).map(|t| (at(i, c, t) - at(j, c, t)).powi(2)).sum::<f64>().sqrt()))
                .collect();
            for _ in 0..k {
                let (j, dist) = d
                    .iter()
                    .enumerate()
                    .filter_map(|(j, x)| x.map(|x| (j, x)))
                    .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                    .unwrap();
                a[i][j] = dist;
                d[j] = None;
            }
        }
        let dm: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
        let total: f64 = dm.iter().sum();
        let e = if n_out == 1 {
            0.0
        } else if total == 0.0 {
            (n_out as f64).log2()
        } else {
            dm.iter().filter(|&&x| x > 0.0).map(|&x| -(x / total) * (x / total).log2()).sum()
        };
        density.push(dm);
        entropy.push(e);
    }
    let (sn, en) = (normalize(&sparsity), normalize(&entropy));
    let kse = sn.iter().zip(&en).map(|(s, e)| (s / (1.0 + alpha * e)).sqrt()).collect();
    BruteKse { sparsity, density, entropy, kse }
}

pub fn brute_bias(reals: &[Vec<f64>], roi: &[usize], truth: &[f64]) -> f64 {
    let mean_in = |img: &[f64]| roi.iter().map(|&j| img[j]).sum::<f64>() / roi.len() as f64;
    let t = mean_in(truth);
    let mu = reals.iter().map(|r| mean_in(r)).sum::<f64>() / reals.len() as f64;
    100.0 * (mu - t) / t
}

pub fn brute_cov(reals: &[Vec<f64>], roi: &[usize]) -> f64 {
    let r = reals.len() as f64;
    let mut sigma = 0.0;
    let mut mu = 0.0;
    for &j in roi {
        let vals: Vec<f64> = reals.iter().map(|x| x[j]).collect();
        let m = vals.iter().sum::<f64>() / r;
        let ss: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum();
        sigma += (ss / (r - 1.0)).sqrt();
        mu += m;
    }
    100.0 * (sigma / roi.len() as f64) / (mu / roi.len() as f64)
}

/// `max |a - n| / max(max |a|, max |n|)`; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `loss` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + FD_STEP;
            let up = loss(x);
            x.data_mut()[i] = orig - FD_STEP;
            let down = loss(x);
            x.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error over input, weight and bias gradients of one
/// random convolution under the loss `Σ r ⊙ conv(x)`.
pub fn conv_case(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (b, c, n, h, w) = (g.random_range(1..3), g.random_range(1..4), g.random_range(1..4), g.random_range(3..6), g.random_range(3..6));
    let mut x = uniform(&mut g, &[b, c, h, w], -1.0, 1.0);
    let mut wt = uniform(&mut g, &[n, c, 3, 3], -1.0, 1.0);
    let mut bias = uniform(&mut g, &[n], -1.0, 1.0);
    let r = uniform(&mut g, &[b, n, h, w], -1.0, 1.0);
    let params = ConvParams::new(wt.clone(), Some(bias.clone())).unwrap();
    let grads = conv2d_backward(&x, &params, &r).unwrap();

    let loss = |x: &Tensor<f64>, wt: &Tensor<f64>, bias: &Tensor<f64>| {
        dot(&conv2d_forward(x, &ConvParams::new(wt.clone(), Some(bias.clone())).unwrap()).unwrap(), &r)
    };
    let (w0, b0) = (wt.clone(), bias.clone());
    let gx = numeric_grad(&mut x, |x| loss(x, &w0, &b0));
    let x0 = x.clone();
    let gw = numeric_grad(&mut wt, |wt| loss(&x0, wt, &b0));
    let gb = numeric_grad(&mut bias, |bias| loss(&x0, &w0, bias));
    rel_err(grads.input.unwrap().data(), &gx)
        .max(rel_err(grads.weights.data(), &gw))
        .max(rel_err(grads.bias.unwrap().data(), &gb))
}

/// Same for train-mode batch norm under a nonlinear loss; odd seeds also
/// pin a random subset of channels to their running statistics.
pub fn batchnorm_case(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (b, c, h, w) = (g.random_range(1..4), g.random_range(1..5), g.random_range(2..5), g.random_range(2..5));
    let mut x = uniform(&mut g, &[b, c, h, w], -2.0, 2.0);
    let mut params = BatchNormParams::<f64>::identity(c);
    params.gamma = uniform(&mut g, &[c], 0.5, 1.5);
    params.beta = uniform(&mut g, &[c], -0.5, 0.5);
    params.running_mean = uniform(&mut g, &[c], -0.5, 0.5);
    params.running_var = uniform(&mut g, &[c], 0.5, 2.0);
    let fixed: Vec<bool> = (0..c).map(|_| seed % 2 == 1 && g.random_bool(0.5)).collect();
    let r = uniform(&mut g, &[b, c, h, w], -1.0, 1.0);
    // Nonlinear in the output so the variance path is exercised.
    let loss_of = |y: &Tensor<f64>| y.data().iter().zip(r.data()).map(|(v, q)| q * v + 0.25 * v * v).sum::<f64>();

    let (y, stats) = batchnorm_forward_fixed(&x, &params, &fixed).unwrap();
    let dy = Tensor::new(y.shape().to_vec(), y.data().iter().zip(r.data()).map(|(v, q)| q + 0.5 * v).collect()).unwrap();
    let grads = batchnorm_backward(&params, &stats, &dy).unwrap();

    let fwd = |x: &Tensor<f64>, p: &BatchNormParams<f64>| {
        if fixed.iter().any(|&f| f) {
            batchnorm_forward_fixed(x, p, &fixed).unwrap().0
        } else {
            batchnorm_forward(x, p, Mode::Train).unwrap().0
        }
    };
    let p0 = params.clone();
    let gx = numeric_grad(&mut x, |x| loss_of(&fwd(x, &p0)));
    let x0 = x.clone();
    let mut gamma = params.gamma.clone();
    let gg = numeric_grad(&mut gamma, |gm| loss_of(&fwd(&x0, &BatchNormParams { gamma: gm.clone(), ..p0.clone() })));
    let mut beta = params.beta.clone();
    let gb = numeric_grad(&mut beta, |bt| loss_of(&fwd(&x0, &BatchNormParams { beta: bt.clone(), ..p0.clone() })));
    rel_err(grads.input.data(), &gx)
        .max(rel_err(grads.gamma.data(), &gg))
        .max(rel_err(grads.beta.data(), &gb))
}

/// ReLU away from its kink.
pub fn relu_case(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut x = Tensor::from_fn(&[2, 3, 4, 4], |_| {
        let v: f64 = g.random_range(0.05..1.0);
        if g.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = uniform(&mut g, &[2, 3, 4, 4], -1.0, 1.0);
    let analytic = relu_backward(&x, &r);
    let numeric = numeric_grad(&mut x, |x| dot(&relu_forward(x), &r));
    rel_err(analytic.data(), &numeric)
}

/// Every parameter gradient of a small train-mode network.
pub fn network_case(seed: u64) -> f64 {
    let mut g = rng(seed);
    let cfg = NetworkConfig { depth: 3, channels: 3, input_slices: 3 };
    let mut net: Network<f64> = build_network(&cfg, seed).unwrap().cast();
    for b in &mut net.blocks {
        if let Some(bn) = &mut b.bn {
            bn.gamma = uniform(&mut g, &[cfg.channels], 0.5, 1.5);
            bn.beta = uniform(&mut g, &[cfg.channels], -0.2, 0.2);
        }
    }
    let x = uniform(&mut g, &[2, 3, 4, 4], 0.0, 1.0);
    let r = uniform(&mut g, &[2, 1, 4, 4], -1.0, 1.0);
    let (_, cache) = net.forward_cached(&x, Mode::Train).unwrap();
    let grads = net.backward(&cache, &r).unwrap();
    let loss = |n: &Network<f64>| dot(&n.forward(&x, Mode::Train).unwrap(), &r);
    let mut worst: f64 = 0.0;
    for i in 0..net.blocks.len() {
        let mut wt = net.blocks[i].conv.weights.clone();
        let mut probe = net.clone();
        let numeric = numeric_grad(&mut wt, |w| {
            probe.blocks[i].conv.weights = w.clone();
            loss(&probe)
        });
        worst = worst.max(rel_err(grads[i].weights.data(), &numeric));
        if let Some(bn) = &net.blocks[i].bn {
            let mut gamma = bn.gamma.clone();
            let mut probe = net.clone();
            let numeric = numeric_grad(&mut gamma, |gm| {
                probe.blocks[i].bn.as_mut().unwrap().gamma = gm.clone();
                loss(&probe)
            });
            worst = worst.max(rel_err(grads[i].gamma.as_ref().unwrap().data(), &numeric));
        }
        if let Some(bias) = &net.blocks[i].conv.bias {
            let mut bias = bias.clone();
            let mut probe = net.clone();
            let numeric = numeric_grad(&mut bias, |b| {
                probe.blocks[i].conv.bias = Some(b.clone());
                loss(&probe)
            });
            worst = worst.max(rel_err(grads[i].bias.as_ref().unwrap().data(), &numeric));
        }
    }
    worst
}

use tgd_core::masking::MaskSet;
use tgd_core::phantom::{build_dataset, PhantomSpec, ScanProtocol, COUNT_LEVELS};
use tgd_core::train::{finetune_tgd, pair_samples, train_scratch, train_warm_start, Sample, SampleSlices, TrainConfig};
use tgd_core::weights::network_hash;

/// Small phantom training pairs (`[3, size, size]` inputs).
pub fn toy_samples(phantoms: usize, size: usize, seed: u64) -> Vec<Sample> {
    let specs: Vec<_> = (0..phantoms).map(|i| PhantomSpec::random(size, size, 3, seed * 100 + i as u64)).collect();
    let protocol = ScanProtocol { psf_sigma: 1.5, count_budget: 2e4, seed };
    let ds = build_dataset(&specs, &protocol, &COUNT_LEVELS[..2], 0).unwrap();
    pair_samples(&ds.train, 3, SampleSlices::Centre).unwrap()
}

/// A briefly trained toy network, so KSE scores spread out.
pub fn toy_network(samples: &[Sample], seed: u64) -> Network<f32> {
    let cfg = NetworkConfig { depth: 5, channels: 6, input_slices: 3 };
    let tc = TrainConfig { epochs: 20, batch_size: 4, ..TrainConfig::scratch(seed) };
    train_scratch(&cfg, &tc, samples, &[]).unwrap().network
}

/// Entries owned by frozen channels that differ between `before` and
/// `after` (conv rows, biases, γ, β, running mean and variance).
pub fn frozen_changes(before: &Network<f32>, after: &Network<f32>, masks: &MaskSet) -> Vec<String> {
    let mut bad = Vec::new();
    for (i, lm) in masks.layers.iter().enumerate() {
        let (b, a) = (&before.blocks[i], &after.blocks[i]);
        let row = b.conv.weights.numel() / lm.conv.len();
        for n in (0..lm.conv.len()).filter(|&n| !lm.conv.retrains(n)) {
            let r = n * row..(n + 1) * row;
            let same = b.conv.weights.data()[r.clone()].iter().zip(&a.conv.weights.data()[r]).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                bad.push(format!("layer {i} kernel row {n}"));
            }
            if let (Some(bb), Some(ab)) = (&b.conv.bias, &a.conv.bias) {
                if bb[n].to_bits() != ab[n].to_bits() {
                    bad.push(format!("layer {i} bias {n}"));
                }
            }
        }
        if let (Some(bm), Some(bb), Some(ab)) = (&lm.bn, &b.bn, &a.bn) {
            for c in (0..bm.len()).filter(|&c| !bm.retrains(c)) {
                for (name, x, y) in [
                    ("gamma", &bb.gamma, &ab.gamma),
                    ("beta", &bb.beta, &ab.beta),
                    ("running_mean", &bb.running_mean, &ab.running_mean),
                    ("running_var", &bb.running_var, &ab.running_var),
                ] {
                    if x[c].to_bits() != y[c].to_bits() {
                        bad.push(format!("layer {i} {name} {c}"));
                    }
                }
            }
        }
    }
    bad
}

pub struct FreezeRun {
    pub steps: usize,
    pub retrained: usize,
    pub total: usize,
    pub violations: Vec<String>,
    /// Whether any retrained entry moved at all.
    pub retrained_moved: bool,
}

/// `steps` masked Adam steps (batch 2) at threshold `phi`.
pub fn freeze_exactness(steps: usize, phi: f64, seed: u64) -> FreezeRun {
    let samples = toy_samples(4, 12, seed);
    let net = toy_network(&samples, seed);
    let per_epoch = samples.len().div_ceil(2);
    let cfg = TrainConfig { epochs: steps.div_ceil(per_epoch), batch_size: 2, learning_rate: 1e-3, ..TrainConfig::tgd_finetune(phi, seed) };
    let out = finetune_tgd(&net, &cfg, &samples, &[], None).unwrap();
    FreezeRun {
        steps: out.record.summary.steps,
        retrained: out.masks.retrained_channels(),
        total: out.masks.total_channels(),
        violations: frozen_changes(&net, &out.network, &out.masks),
        retrained_moved: network_hash(&net) != network_hash(&out.network),
    }
}

/// φ = 0 with the output layer frozen: the fine-tuned network must be the
/// input network. Returns (input hash, output hash).
pub fn phi_zero_identity(seed: u64) -> (String, String) {
    let samples = toy_samples(3, 12, seed);
    let net = toy_network(&samples, seed);
    let cfg = TrainConfig { epochs: 10, batch_size: 2, ..TrainConfig::tgd_finetune(0.0, seed) };
    let out = finetune_tgd(&net, &cfg, &samples, &[], None).unwrap();
    (network_hash(&net), network_hash(&out.network))
}

/// φ > 1 with the output layer trainable against an unmasked warm start,
/// full batch. Returns per-epoch losses and final hashes of both runs.
pub fn phi_above_one_matches_warm_start(seed: u64) -> ((Vec<u64>, String), (Vec<u64>, String)) {
    let samples = toy_samples(3, 12, seed);
    let net = toy_network(&samples, seed);
    let base = TrainConfig { epochs: 15, batch_size: samples.len(), learning_rate: 1e-3, ..TrainConfig::scratch(seed) };
    let warm = train_warm_start(&net, &base, &samples, &[]).unwrap();
    let tgd_cfg = TrainConfig { last_layer_frozen: false, ..TrainConfig { mode: tgd_core::train::TrainMode::TgdFinetune, phi: Some(1.5), ..base } };
    let tgd = finetune_tgd(&net, &tgd_cfg, &samples, &[], None).unwrap();
    assert_eq!(tgd.masks.retrained_channels(), tgd.masks.total_channels());
    let trace = |o: &tgd_core::train::TrainOutcome| -> (Vec<u64>, String) {
        (o.record.epochs.iter().map(|e| e.train_loss.to_bits()).collect(), network_hash(&o.network))
    };
    (trace(&warm), trace(&tgd))
}
