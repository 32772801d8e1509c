//! Adam with per-output-channel freezing.
//!
//! Parameters are updated in rows, one row per output channel. A frozen row
//! is skipped entirely: its values, its moment estimates and its step count
//! all stay as they were, so unfreezing it later resumes from a clean state.

use serde::{Deserialize, Serialize};

use crate::model::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// L2 penalty on convolution weights (not on biases or BN affine terms).
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn new(learning_rate: f32, weight_decay: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: Vec<u32>,
    row_len: usize,
}

impl Slot {
    pub fn new(rows: usize, row_len: usize) -> Self {
        Self {
            m: vec![0.0; rows * row_len],
            v: vec![0.0; rows * row_len],
            steps: vec![0; rows],
            row_len,
        }
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }

    /// One Adam step on every row with `trainable(row)`.
    pub fn step(
        &mut self,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
        trainable: impl Fn(usize) -> bool,
        cfg: &AdamConfig,
        decay: bool,
    ) {
        assert_eq!(param.numel(), grad.numel(), "parameter/gradient length mismatch");
        assert_eq!(param.numel(), self.m.len(), "parameter/optimizer-state length mismatch");
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        let p = param.data_mut();
        let g = grad.data();
        for row in 0..self.steps.len() {
            if !trainable(row) {
                continue;
            }
            self.steps[row] += 1;
            let t = self.steps[row] as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let step = cfg.learning_rate / bc1;
            for i in row * self.row_len..(row + 1) * self.row_len {
                let gi = g[i] + wd * p[i];
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step * self.m[i] / ((self.v[i] / bc2).sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvState {
    pub weights: Slot,
    pub bias: Option<Slot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Slot,
    pub beta: Slot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub conv: ConvState,
    pub bn: Option<BnState>,
}

/// Optimizer state for a whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub layers: Vec<LayerState>,
}

impl AdamState {
    pub fn for_network(net: &Network<f32>) -> Self {
        Self {
            layers: net
                .blocks
                .iter()
                .map(|b| {
                    let n = b.conv.out_channels();
                    LayerState {
                        conv: ConvState {
                            weights: Slot::new(n, b.conv.in_channels() * 9),
                            bias: b.conv.bias.as_ref().map(|_| Slot::new(n, 1)),
                        },
                        bn: b.bn.as_ref().map(|bn| BnState {
                            gamma: Slot::new(bn.channels(), 1),
                            beta: Slot::new(bn.channels(), 1),
                        }),
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_textbook_adam_on_one_row() {
        let cfg = AdamConfig::new(0.01, 0.0);
        let mut p = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let mut slot = Slot::new(1, 2);
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        let mut want = [1.0f64, -2.0];
        for t in 1..=5 {
            let g = Tensor::new(vec![2], vec![0.5f32 * t as f32, -1.0]).unwrap();
            slot.step(&mut p, &g, |_| true, &cfg, true);
            for i in 0..2 {
                let gi = g[i] as f64;
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                want[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((p[i] as f64 - want[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn frozen_rows_keep_state() {
        let cfg = AdamConfig::new(0.1, 1e-3);
        let mut p = Tensor::new(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::full(&[4], 1.0f32);
        let mut slot = Slot::new(2, 2);
        slot.step(&mut p, &g, |r| r == 0, &cfg, true);
        assert_eq!(&p.data()[2..], &[3.0, 4.0]);
        assert_ne!(p[0], 1.0);
        assert_eq!(slot.steps(), &[1, 0]);
        assert_eq!(&slot.moments().0[2..], &[0.0, 0.0]);
    }
}
