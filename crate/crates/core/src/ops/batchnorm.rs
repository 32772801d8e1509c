//! Per-channel batch normalization over (batch, height, width).

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Result, TgdError};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// EMA update weight of the newest batch statistic.
    pub momentum: T,
    pub epsilon: T,
}

/// Batch statistics kept from a train-mode forward for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    /// Biased (divide by count) variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub x_hat: Tensor<T>,
    /// Samples per channel (batch × height × width).
    pub count: usize,
    /// Channels normalized with the running statistics instead of the
    /// batch's; their mean and variance are constants for the backward pass.
    pub fixed: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::from_f64(DEFAULT_MOMENTUM),
            epsilon: T::from_f64(DEFAULT_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(TgdError::shape("BatchNormParams", format!("{name} [{c}]"), format!("{:?}", t.shape())));
            }
        }
        if self.running_var.data().iter().any(|&v| !(v > T::zero())) {
            return Err(TgdError::InvalidArgument("running_var must be strictly positive".into()));
        }
        Ok(())
    }

    /// EMA update of the running statistics; channels with `mask[c] == false`
    /// and channels the batch normalized with fixed statistics keep their
    /// current values.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>, mask: Option<&[bool]>) {
        let mom = self.momentum;
        let keep = T::one() - mom;
        let m = stats.count as f64;
        let unbias = T::from_f64(m / (m - 1.0));
        for c in 0..self.channels() {
            if mask.is_some_and(|mk| !mk[c]) || stats.fixed.get(c).copied().unwrap_or(false) {
                continue;
            }
            self.running_mean[c] = keep * self.running_mean[c] + mom * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + mom * stats.var[c] * unbias;
        }
    }
}

/// Train mode normalizes with batch statistics (and returns them); infer
/// mode uses the running statistics and returns `None`.
///
/// Running statistics are not touched here; see
/// [`BatchNormParams::update_running_stats`].
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    params.validate()?;
    let (batch, chans, h, w) = check_input(input, params)?;
    match mode {
        Mode::Infer => {
            let hw = h * w;
            let x = input.data();
            let mut out = vec![T::zero(); x.len()];
            for c in 0..chans {
                let inv = (params.running_var[c] + params.epsilon).sqrt().recip();
                let scale = params.gamma[c] * inv;
                let shift = params.beta[c] - params.running_mean[c] * scale;
                for b in 0..batch {
                    let off = (b * chans + c) * hw;
                    for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                        *o = v * scale + shift;
                    }
                }
            }
            Ok((Tensor::new(input.shape().to_vec(), out)?, None))
        }
        Mode::Train => train_forward(input, params, &vec![false; chans]).map(|(y, s)| (y, Some(s))),
    }
}

/// Train-mode forward in which channels with `fixed[c]` normalize with the
/// running statistics, computing exactly what they compute at inference.
pub fn batchnorm_forward_fixed<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    fixed: &[bool],
) -> Result<(Tensor<T>, BatchStats<T>)> {
    params.validate()?;
    check_input(input, params)?;
    if fixed.len() != params.channels() {
        return Err(TgdError::shape("batchnorm_forward_fixed", params.channels(), fixed.len()));
    }
    train_forward(input, params, fixed)
}

fn check_input<T: Scalar>(input: &Tensor<T>, params: &BatchNormParams<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = input.dims4("batchnorm_forward")?;
    if dims.1 != params.channels() {
        return Err(TgdError::shape(
            "batchnorm_forward",
            format!("{} channels", params.channels()),
            format!("{:?}", input.shape()),
        ));
    }
    Ok(dims)
}

fn train_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    fixed: &[bool],
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (batch, chans, h, w) = input.dims4("batchnorm_forward")?;
    let hw = h * w;
    let x = input.data();
    let count = batch * hw;
    if count < 2 {
        return Err(TgdError::InvalidArgument(format!(
            "batchnorm_forward: train mode needs at least 2 samples per channel, got {count}"
        )));
    }
    let m = T::from_f64(count as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); chans];
    let mut var = vec![T::zero(); chans];
    let mut inv_std = vec![T::zero(); chans];
    let mut x_hat = vec![T::zero(); x.len()];
    for c in 0..chans {
        let (mu, v) = if fixed[c] {
            (params.running_mean[c], params.running_var[c])
        } else {
            let mut s = T::zero();
            for b in 0..batch {
                let off = (b * chans + c) * hw;
                s = s + x[off..off + hw].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut ss = T::zero();
            for b in 0..batch {
                let off = (b * chans + c) * hw;
                ss = ss + x[off..off + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            (mu, ss / m)
        };
        let inv = (v + params.epsilon).sqrt().recip();
        mean[c] = mu;
        var[c] = v;
        inv_std[c] = inv;
        let (g, be) = (params.gamma[c], params.beta[c]);
        let scale = g * inv;
        let shift = be - mu * scale;
        for b in 0..batch {
            let off = (b * chans + c) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mu) * inv;
                x_hat[i] = xh;
                out[i] = if fixed[c] { x[i] * scale + shift } else { g * xh + be };
            }
        }
    }
    let stats = BatchStats {
        mean,
        var,
        inv_std,
        x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
        count,
        fixed: fixed.to_vec(),
    };
    Ok((Tensor::new(input.shape().to_vec(), out)?, stats))
}

/// Exact gradients of the train-mode forward.
pub fn batchnorm_backward<T: Scalar>(
    params: &BatchNormParams<T>,
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != stats.x_hat.shape() {
        return Err(TgdError::shape(
            "batchnorm_backward",
            format!("{:?}", stats.x_hat.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (batch, chans, h, w) = grad_out.dims4("batchnorm_backward")?;
    let hw = h * w;
    let g = grad_out.data();
    let xh = stats.x_hat.data();
    let m = T::from_f64(stats.count as f64);
    let mut gx = vec![T::zero(); g.len()];
    let mut ggamma = vec![T::zero(); chans];
    let mut gbeta = vec![T::zero(); chans];

    for c in 0..chans {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..batch {
            let off = (b * chans + c) * hw;
            for i in off..off + hw {
                sum_g = sum_g + g[i];
                sum_gx = sum_gx + g[i] * xh[i];
            }
        }
        ggamma[c] = sum_gx;
        gbeta[c] = sum_g;
        if stats.fixed.get(c).copied().unwrap_or(false) {
            let k = params.gamma[c] * stats.inv_std[c];
            for b in 0..batch {
                let off = (b * chans + c) * hw;
                for i in off..off + hw {
                    gx[i] = k * g[i];
                }
            }
            continue;
        }
        let k = params.gamma[c] * stats.inv_std[c] / m;
        for b in 0..batch {
            let off = (b * chans + c) * hw;
            for i in off..off + hw {
                gx[i] = k * (m * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }

    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![chans], ggamma)?,
        beta: Tensor::new(vec![chans], gbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, TestRng};

    fn random_params(rng: &mut TestRng, c: usize) -> BatchNormParams<f64> {
        let mut p = BatchNormParams::identity(c);
        p.gamma = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 2.0));
        p.beta = Tensor::from_fn(&[c], |_| rng.uniform(-1.0, 1.0));
        p
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = TestRng::new(1);
        let x = rand_tensor(&mut rng, &[3, 2, 4, 5]).map(|v| 4.0 * v + 7.0);
        let (y, _) = batchnorm_forward(&x, &BatchNormParams::identity(2), Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + c) * 20..(b * 2 + c + 1) * 20].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn infer_mode_constant_input() {
        let mut p = BatchNormParams::<f64>::identity(1);
        p.gamma[0] = 2.0;
        p.beta[0] = 3.0;
        p.running_mean[0] = 5.0;
        let x = Tensor::full(&[2, 1, 3, 3], 5.0);
        let (y, stats) = batchnorm_forward(&x, &p, Mode::Infer).unwrap();
        assert!(stats.is_none());
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = TestRng::new(4);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
            let p = random_params(&mut rng, 3);
            let (y, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
            for c in 0..3 {
                let idx: Vec<usize> = (0..2).flat_map(|b| (b * 3 + c) * 12..(b * 3 + c + 1) * 12).collect();
                let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
                let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
                for &i in &idx {
                    let want = p.gamma[c] * (x[i] - mean) / (var + 1e-5).sqrt() + p.beta[c];
                    assert!((y[i] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert!(batchnorm_forward(&x, &BatchNormParams::identity(2), Mode::Train).is_err());
        assert!(batchnorm_forward(&x, &BatchNormParams::identity(2), Mode::Infer).is_ok());
    }

    #[test]
    fn constant_channel_does_not_divide_by_zero() {
        let x = Tensor::<f32>::full(&[2, 1, 2, 2], 3.0);
        let (y, _) = batchnorm_forward(&x, &BatchNormParams::identity(1), Mode::Train).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn zero_cotangent_and_beta_is_sum() {
        let mut rng = TestRng::new(8);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let p = random_params(&mut rng, 2);
        let (_, stats) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        let stats = stats.unwrap();
        let z = batchnorm_backward(&p, &stats, &Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        assert!(z.input.data().iter().chain(z.gamma.data()).chain(z.beta.data()).all(|&v| v == 0.0));

        let g = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let grads = batchnorm_backward(&p, &stats, &g).unwrap();
        for c in 0..2 {
            let s: f64 = (0..2).flat_map(|b| (b * 2 + c) * 9..(b * 2 + c + 1) * 9).map(|i| g[i]).sum();
            assert!((grads.beta[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_respect_mask() {
        let mut rng = TestRng::new(2);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]).map(|v| v + 4.0);
        let mut p = BatchNormParams::<f64>::identity(2);
        let (_, stats) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        p.update_running_stats(&stats.unwrap(), Some(&[false, true]));
        assert_eq!(p.running_mean[0], 0.0);
        assert_eq!(p.running_var[0], 1.0);
        assert!(p.running_mean[1] > 0.3);
    }
}
