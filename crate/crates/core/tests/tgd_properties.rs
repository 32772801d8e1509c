mod oracles;

use proptest::prelude::*;
use tgd_core::masking::{masked_update, ChannelMask, MaskSet};
use tgd_core::model::Network;
use tgd_core::ops::{batchnorm_forward, batchnorm_forward_fixed, BatchNormParams, ConvParams, Mode};
use tgd_core::optim::{AdamConfig, ConvState, Slot};
use tgd_core::train::{finetune_tgd, online_n2n, TrainConfig};
use tgd_core::weights::network_hash;
use tgd_core::{build_network, NetworkConfig, Tensor};

#[test]
fn frozen_entries_are_bit_identical_after_long_training() {
    let run = oracles::freeze_exactness(500, 0.3, 1);
    assert!(run.steps >= 500);
    assert!(run.retrained > 0 && run.retrained < run.total, "{}/{} retrained", run.retrained, run.total);
    assert!(run.retrained_moved);
    assert!(run.violations.is_empty(), "{:?}", run.violations);
}

#[test]
fn phi_zero_leaves_the_network_unchanged() {
    let (before, after) = oracles::phi_zero_identity(2);
    assert_eq!(before, after);
}

#[test]
fn phi_above_one_reproduces_warm_start() {
    let (warm, tgd) = oracles::phi_above_one_matches_warm_start(3);
    assert_eq!(warm, tgd);
}

#[test]
fn full_tgd_run_keeps_frozen_channels_at_every_threshold() {
    let samples = oracles::toy_samples(3, 12, 4);
    let net = oracles::toy_network(&samples, 4);
    for phi in [0.2, 0.4, 0.6, 0.8] {
        for frozen_last in [true, false] {
            let cfg = TrainConfig { epochs: 5, batch_size: 3, last_layer_frozen: frozen_last, ..TrainConfig::tgd_finetune(phi, 4) };
            let out = finetune_tgd(&net, &cfg, &samples, &[], None).unwrap();
            let bad = oracles::frozen_changes(&net, &out.network, &out.masks);
            assert!(bad.is_empty(), "phi {phi}: {bad:?}");
        }
    }
}

#[test]
fn n2n_label_swap_is_bit_identical_full_batch() {
    let samples = oracles::toy_samples(2, 12, 5);
    let net = oracles::toy_network(&samples, 5);
    let spec = tgd_core::phantom::PhantomSpec::random(12, 12, 4, 55);
    let study = tgd_core::phantom::generate_study(&spec, &tgd_core::phantom::ScanProtocol { psf_sigma: 0.8, count_budget: 1e4, seed: 5 }, 2).unwrap();
    let (a, b) = &study.n2n_halves;
    let cfg = TrainConfig { epochs: 6, batch_size: 64, ..TrainConfig::n2n_online(0.5, 5) };
    let ab = online_n2n(&net, &cfg, a, b, None).unwrap();
    let ba = online_n2n(&net, &cfg, b, a, None).unwrap();
    assert_eq!(network_hash(&ab.network), network_hash(&ba.network));
    assert_eq!(ab.record, ba.record);
}

#[test]
fn training_is_deterministic() {
    let samples = oracles::toy_samples(3, 12, 6);
    let net = oracles::toy_network(&samples, 6);
    let cfg = TrainConfig { epochs: 4, batch_size: 2, ..TrainConfig::tgd_finetune(0.5, 6) };
    let a = finetune_tgd(&net, &cfg, &samples, &[], None).unwrap();
    let b = finetune_tgd(&net, &cfg, &samples, &[], None).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.network, b.network);
}

#[test]
fn masks_have_no_effect_on_inference() {
    let samples = oracles::toy_samples(2, 12, 7);
    let net = oracles::toy_network(&samples, 7);
    let x = Tensor::stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>()).unwrap();
    let before = net.forward(&x, Mode::Infer).unwrap();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::tgd_finetune(0.4, 7) };
    let out = finetune_tgd(&net, &cfg, &samples, &[], None).unwrap();
    assert!(out.masks.retrained_channels() > 0);
    let after = out.network.forward(&x, Mode::Infer).unwrap();
    assert_eq!(before, after);
}

fn conv_params(rows: usize, cols: usize, vals: &[f32]) -> ConvParams<f32> {
    ConvParams::new(Tensor::new(vec![rows, cols, 3, 3], vals[..rows * cols * 9].to_vec()).unwrap(), Some(Tensor::new(vec![rows], vals[..rows].to_vec()).unwrap())).unwrap()
}

fn arb_update() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>, Vec<bool>, usize)> {
    (1usize..6, 1usize..4).prop_flat_map(|(n, c)| {
        let len = n * c * 9;
        (
            Just(n),
            Just(c),
            prop::collection::vec(-1.0f32..1.0, len),
            prop::collection::vec(-1.0f32..1.0, len),
            prop::collection::vec(any::<bool>(), n),
            0usize..4,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A masked step equals an unmasked step followed by restoring the
    /// frozen rows, including after earlier unmasked warm-up steps.
    #[test]
    fn masked_step_equals_step_then_restore((n, c, w, g, mask, warm) in arb_update()) {
        let opt = AdamConfig::new(1e-2, 1e-3);
        let mut params = conv_params(n, c, &w);
        let grad = Tensor::new(vec![n, c, 3, 3], g.clone()).unwrap();
        let bias_grad = Tensor::new(vec![n], g[..n].to_vec()).unwrap();
        let mut state = ConvState { weights: Slot::new(n, c * 9), bias: Some(Slot::new(n, 1)) };
        let all = ChannelMask::all(n, true);
        for _ in 0..warm {
            masked_update(&mut params, &grad, Some(&bias_grad), &all, &mut state, &opt).unwrap();
        }
        let snapshot = params.clone();
        let (mut masked, mut masked_state) = (params.clone(), state.clone());
        let mask = ChannelMask(mask);
        masked_update(&mut masked, &grad, Some(&bias_grad), &mask, &mut masked_state, &opt).unwrap();
        let mut plain = params;
        masked_update(&mut plain, &grad, Some(&bias_grad), &all, &mut state, &opt).unwrap();
        let row = c * 9;
        for r in 0..n {
            if !mask.retrains(r) {
                plain.weights.data_mut()[r * row..(r + 1) * row].copy_from_slice(&snapshot.weights.data()[r * row..(r + 1) * row]);
                plain.bias.as_mut().unwrap().data_mut()[r] = snapshot.bias.as_ref().unwrap()[r];
            }
        }
        prop_assert_eq!(masked, plain);
    }

    #[test]
    fn zero_weight_network_passes_centre_slice(h in 3usize..12, w in 3usize..12, depth in 3usize..6, seed: u64) {
        let mut net: Network = build_network(&NetworkConfig { depth, channels: 3, input_slices: 3 }, seed).unwrap();
        for b in &mut net.blocks {
            b.conv.weights.data_mut().fill(0.0);
        }
        let mut rng = oracles::rng(seed);
        let x: Tensor<f32> = oracles::uniform(&mut rng, &[2, 3, h, w], 0.0, 2.0).cast();
        let y = net.forward(&x, Mode::Infer).unwrap();
        for b in 0..2 {
            for p in 0..h * w {
                prop_assert_eq!(y.data()[b * h * w + p], x.data()[(b * 3 + 1) * h * w + p]);
            }
        }
    }

    #[test]
    fn train_batchnorm_standardizes(b in 1usize..4, c in 1usize..4, h in 2usize..6, w in 2usize..6, seed: u64) {
        let mut rng = oracles::rng(seed);
        let x = oracles::uniform(&mut rng, &[b, c, h, w], -3.0, 5.0);
        let (y, _) = batchnorm_forward(&x, &BatchNormParams::<f64>::identity(c), Mode::Train).unwrap();
        let hw = h * w;
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|bi| y.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].to_vec()).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-5);
            // ε = 1e-5 in the denominator shrinks the variance of nearly
            // constant channels slightly.
            let raw: Vec<f64> = (0..b).flat_map(|bi| x.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].to_vec()).collect();
            let rm = raw.iter().sum::<f64>() / n;
            let rv = raw.iter().map(|x| (x - rm).powi(2)).sum::<f64>() / n;
            prop_assert!((v - rv / (rv + 1e-5)).abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-4 || rv < 0.1);
        }
    }

    #[test]
    fn fixed_channels_compute_their_inference_output(b in 1usize..3, c in 1usize..4, seed: u64) {
        let mut rng = oracles::rng(seed);
        let x = oracles::uniform(&mut rng, &[b, c, 3, 3], -1.0, 1.0);
        let mut p = BatchNormParams::<f64>::identity(c);
        p.running_mean = oracles::uniform(&mut rng, &[c], -0.5, 0.5);
        p.running_var = oracles::uniform(&mut rng, &[c], 0.5, 2.0);
        let (fixed, _) = batchnorm_forward_fixed(&x, &p, &vec![true; c]).unwrap();
        let (infer, _) = batchnorm_forward(&x, &p, Mode::Infer).unwrap();
        prop_assert_eq!(fixed, infer);
    }
}

#[test]
fn unmasked_set_retrains_everything() {
    let net = build_network(&NetworkConfig { depth: 3, channels: 2, input_slices: 3 }, 0).unwrap();
    let m = MaskSet::all_trainable(&net);
    assert_eq!(m.retrained_channels(), m.total_channels());
}
