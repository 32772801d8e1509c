//! Ensemble lesion bias, background coefficient of variation, MSE/PSNR and
//! a probe for artefacts on out-of-distribution structures.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::model::{denoise_volume, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Lesion,
    Background,
}

/// A set of flat voxel indices into a volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRoi")]
pub struct Roi {
    kind: RoiKind,
    indices: Vec<usize>,
}

#[derive(Deserialize)]
struct RawRoi {
    kind: RoiKind,
    indices: Vec<usize>,
}

impl TryFrom<RawRoi> for Roi {
    type Error = TgdError;

    fn try_from(raw: RawRoi) -> Result<Self> {
        Roi::new(raw.kind, raw.indices)
    }
}

impl Roi {
    pub fn new(kind: RoiKind, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(TgdError::EmptyRoi);
        }
        Ok(Self { kind, indices })
    }

    pub fn kind(&self) -> RoiKind {
        self.kind
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn check(&self, numel: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= numel) {
            Some(i) => Err(TgdError::InvalidArgument(format!("ROI index {i} out of bounds for {numel} voxels"))),
            None => Ok(()),
        }
    }

    /// Mean of `t` over the ROI.
    pub fn mean(&self, t: &Tensor<f32>) -> Result<f64> {
        self.check(t.numel())?;
        Ok(self.indices.iter().map(|&i| t[i] as f64).sum::<f64>() / self.indices.len() as f64)
    }
}

fn check_stack(realizations: &[Tensor<f32>], min: usize, what: &str) -> Result<()> {
    if realizations.len() < min {
        return Err(TgdError::UndefinedMetric(format!("{what} needs at least {min} realizations, got {}", realizations.len())));
    }
    let shape = realizations[0].shape();
    if let Some(bad) = realizations.iter().find(|r| r.shape() != shape) {
        return Err(TgdError::shape(
            "ensemble metric",
            format!("{shape:?}"),
            format!("{:?}", bad.shape()),
        ));
    }
    Ok(())
}

/// Percent deviation of the realization-averaged lesion mean from the
/// truth's lesion mean.
pub fn ensemble_bias(realizations: &[Tensor<f32>], roi: &Roi, truth: &Tensor<f32>) -> Result<f64> {
    check_stack(realizations, 1, "ensemble bias")?;
    if truth.shape() != realizations[0].shape() {
        return Err(TgdError::shape("ensemble_bias", format!("{:?}", realizations[0].shape()), format!("{:?}", truth.shape())));
    }
    let t = roi.mean(truth)?;
    if t == 0.0 {
        return Err(TgdError::UndefinedMetric("lesion truth mean is zero".into()));
    }
    let mut mu = 0.0;
    for r in realizations {
        mu += roi.mean(r)?;
    }
    mu /= realizations.len() as f64;
    Ok((mu - t) / t * 100.0)
}

/// ROI mean of the per-voxel sample standard deviation across
/// realizations, over the ROI grand mean, in percent.
pub fn ensemble_cov(realizations: &[Tensor<f32>], roi: &Roi) -> Result<f64> {
    check_stack(realizations, 2, "ensemble CoV")?;
    roi.check(realizations[0].numel())?;
    let r = realizations.len() as f64;
    let (mut sd_sum, mut grand) = (0.0, 0.0);
    for &j in roi.indices() {
        let mean = realizations.iter().map(|t| t[j] as f64).sum::<f64>() / r;
        let var = realizations.iter().map(|t| (t[j] as f64 - mean).powi(2)).sum::<f64>() / (r - 1.0);
        sd_sum += var.sqrt();
        grand += mean;
    }
    let n = roi.len() as f64;
    let grand = grand / n;
    if grand == 0.0 {
        return Err(TgdError::UndefinedMetric("background grand mean is zero".into()));
    }
    Ok(sd_sum / n / grand * 100.0)
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TgdError::shape("mse", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.numel() as f64)
}

/// MSE restricted to `roi`.
pub fn roi_mse(a: &Tensor<f32>, b: &Tensor<f32>, roi: &Roi) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TgdError::shape("roi_mse", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    roi.check(a.numel())?;
    Ok(roi.indices().iter().map(|&i| (a[i] as f64 - b[i] as f64).powi(2)).sum::<f64>() / roi.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFidelity {
    pub mse: f64,
    /// Output ROI mean minus truth ROI mean.
    pub mean_shift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub before: RoiFidelity,
    pub after: RoiFidelity,
    /// `after.mse - before.mse`; negative is an improvement.
    pub delta_mse: f64,
    /// `|after.mean_shift| - |before.mean_shift|`.
    pub delta_abs_shift: f64,
}

pub fn roi_fidelity(output: &Tensor<f32>, truth: &Tensor<f32>, roi: &Roi) -> Result<RoiFidelity> {
    Ok(RoiFidelity {
        mse: roi_mse(output, truth, roi)?,
        mean_shift: roi.mean(output)? - roi.mean(truth)?,
    })
}

/// Denoises `input` (`[S, H, W]`) with both networks and compares each
/// against `truth` inside `roi`.
pub fn hallucination_probe(
    before: &Network<f32>,
    after: &Network<f32>,
    input: &Tensor<f32>,
    truth: &Tensor<f32>,
    roi: &Roi,
) -> Result<HallucinationReport> {
    let b = roi_fidelity(&denoise_volume(before, input)?, truth, roi)?;
    let a = roi_fidelity(&denoise_volume(after, input)?, truth, roi)?;
    Ok(HallucinationReport {
        before: b,
        after: a,
        delta_mse: a.mse - b.mse,
        delta_abs_shift: a.mean_shift.abs() - b.mean_shift.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn roi_rejects_empty_and_out_of_bounds() {
        assert!(matches!(Roi::new(RoiKind::Lesion, vec![]), Err(TgdError::EmptyRoi)));
        let roi = Roi::new(RoiKind::Lesion, vec![5]).unwrap();
        assert!(roi.mean(&t(&[1.0, 2.0])).is_err());
        assert!(serde_json::from_str::<Roi>(r#"{"kind":"lesion","indices":[]}"#).is_err());
    }

    #[test]
    fn bias_cases() {
        let roi = Roi::new(RoiKind::Lesion, vec![0, 1]).unwrap();
        let truth = t(&[2.5, 2.5, 9.0]);
        assert_eq!(ensemble_bias(&[truth.clone(), truth.clone()], &roi, &truth).unwrap(), 0.0);
        let r = t(&[2.0, 2.0, 0.0]);
        assert!((ensemble_bias(&[r.clone(), r], &roi, &truth).unwrap() + 20.0).abs() < 1e-12);
        assert!(ensemble_bias(&[], &roi, &truth).is_err());
    }

    #[test]
    fn cov_cases() {
        let roi = Roi::new(RoiKind::Background, vec![0, 1, 2]).unwrap();
        let c = t(&[4.0, 4.0, 4.0]);
        assert_eq!(ensemble_cov(&[c.clone(), c.clone()], &roi).unwrap(), 0.0);
        let (cc, d) = (4.0f32, 0.5f32);
        let cov = ensemble_cov(&[t(&[cc + d; 3]), t(&[cc - d; 3])], &roi).unwrap();
        let want = d as f64 * 2f64.sqrt() / cc as f64 * 100.0;
        assert!((cov - want).abs() < 1e-12);
        assert!(ensemble_cov(&[c.clone()], &roi).is_err());
        let z = t(&[0.0; 3]);
        assert!(matches!(ensemble_cov(&[z.clone(), z], &roi), Err(TgdError::UndefinedMetric(_))));
    }

    #[test]
    fn mse_and_psnr() {
        assert_eq!(mse(&t(&[0.0, 2.0]), &t(&[0.0, 0.0])).unwrap(), 2.0);
        assert_eq!(mse(&t(&[1.0, 3.0]), &t(&[1.0, 3.0])).unwrap(), 0.0);
        assert_eq!(psnr(&t(&[1.0]), &t(&[1.0]), 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&t(&[0.0]), &t(&[0.1]), 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(mse(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }
}
