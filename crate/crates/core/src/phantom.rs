//! Synthetic emission phantoms and a count-domain scan model.
//!
//! A scan draws independent Poisson counts from the scaled activity and
//! "reconstructs" them by Gaussian blurring with the protocol's PSF, so the
//! PSF width sets both the resolution and the pixel-to-pixel correlation of
//! the noise. Lower-count scans are made by binomially thinning the counts
//! of a higher-count one, the image-domain stand-in for list-mode rebinning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::metrics::{Roi, RoiKind};
use crate::tensor::Tensor;

/// Count fractions of the target budget for noise-adaptive training inputs:
/// 30, 45, 60, 90, 120 and 180 s out of a 600 s reference acquisition.
pub const COUNT_LEVELS: [f64; 6] = [30.0 / 600.0, 45.0 / 600.0, 60.0 / 600.0, 90.0 / 600.0, 120.0 / 600.0, 180.0 / 600.0];

pub const V1_PSF_SIGMA: f64 = 1.5;
pub const V2_PSF_SIGMA: f64 = 0.8;

/// SplitMix64 finalizer folded over `parts`; used to give every phantom,
/// level and realization its own stream.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along x before rotation (pixels).
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    #[serde(default)]
    pub angle: f64,
    pub intensity: f64,
}

/// Spherical lesion whose value is `contrast` times the local background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub contrast: f64,
}

/// Cylindrical structure of fixed absolute intensity, present on every
/// slice. Used for out-of-distribution objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    #[serde(default)]
    pub ellipses: Vec<Ellipse>,
    #[serde(default)]
    pub lesions: Vec<Lesion>,
    #[serde(default)]
    pub disks: Vec<Disk>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn empty(height: usize, width: usize, slices: usize) -> Self {
        Self {
            height,
            width,
            slices,
            ellipses: Vec::new(),
            lesions: Vec::new(),
            disks: Vec::new(),
            seed: 0,
        }
    }

    /// A body outline, a brighter "liver", two small warm ellipses and one
    /// lesion (radius 3, contrast 2) in the liver, all jittered by `seed`.
    pub fn random(height: usize, width: usize, slices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5eed]));
        let (h, w) = (height as f64, width as f64);
        let (mx, my) = (w / 2.0, h / 2.0);
        let body = Ellipse {
            cx: mx + rng.random_range(-0.03..0.03) * w,
            cy: my + rng.random_range(-0.03..0.03) * h,
            a: rng.random_range(0.38..0.46) * w,
            b: rng.random_range(0.30..0.40) * h,
            angle: rng.random_range(-0.2..0.2),
            intensity: rng.random_range(0.8..1.2),
        };
        let liver = Ellipse {
            cx: mx + rng.random_range(-0.18..-0.08) * w,
            cy: my + rng.random_range(-0.08..0.08) * h,
            a: rng.random_range(0.14..0.20) * w,
            b: rng.random_range(0.12..0.18) * h,
            angle: rng.random_range(-0.6..0.6),
            intensity: rng.random_range(0.6..1.0),
        };
        let mut ellipses = vec![body, liver.clone()];
        for _ in 0..2 {
            ellipses.push(Ellipse {
                cx: mx + rng.random_range(0.05..0.22) * w,
                cy: my + rng.random_range(-0.18..0.18) * h,
                a: rng.random_range(0.03..0.08) * w,
                b: rng.random_range(0.03..0.08) * h,
                angle: rng.random_range(-1.5..1.5),
                intensity: rng.random_range(0.3..1.5),
            });
        }
        let lesion = Lesion {
            cx: liver.cx + rng.random_range(-0.3..0.3) * liver.a.min(liver.b),
            cy: liver.cy + rng.random_range(-0.3..0.3) * liver.a.min(liver.b),
            radius: 3.0,
            contrast: 2.0,
        };
        Self {
            height,
            width,
            slices,
            ellipses,
            lesions: vec![lesion],
            disks: Vec::new(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.slices == 0 {
            return Err(TgdError::InvalidArgument("phantom dimensions must be positive".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for e in &self.ellipses {
            if !(e.intensity >= 0.0) || !(e.a > 0.0) || !(e.b > 0.0) {
                return Err(TgdError::InvalidArgument(format!("invalid ellipse {e:?}")));
            }
        }
        let inside = |cx: f64, cy: f64, r: f64| cx - r >= 0.0 && cy - r >= 0.0 && cx + r <= w && cy + r <= h;
        for (i, l) in self.lesions.iter().enumerate() {
            if !(l.radius > 0.0) || !(l.contrast >= 0.0) || !inside(l.cx, l.cy, l.radius) {
                return Err(TgdError::InvalidArgument(format!("lesion {i} lies outside the image or is invalid: {l:?}")));
            }
        }
        for (i, d) in self.disks.iter().enumerate() {
            if !(d.radius > 0.0) || !(d.intensity >= 0.0) || !inside(d.cx, d.cy, d.radius) {
                return Err(TgdError::InvalidArgument(format!("disk {i} lies outside the image or is invalid: {d:?}")));
            }
        }
        Ok(())
    }

    fn dz(&self, s: usize) -> f64 {
        s as f64 - (self.slices as f64 - 1.0) / 2.0
    }

    /// Ellipsoids shrink slowly away from the centre slice.
    fn ellipse_scale(&self, s: usize) -> f64 {
        let z = self.dz(s) / self.slices.max(2) as f64;
        (1.0 - z * z).max(0.0).sqrt()
    }

    fn lesion_radius(&self, l: &Lesion, s: usize) -> f64 {
        let dz = self.dz(s);
        (l.radius * l.radius - dz * dz).max(0.0).sqrt()
    }

    fn in_ellipse(e: &Ellipse, scale: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - e.cx, y - e.cy);
        let (c, s) = (e.angle.cos(), e.angle.sin());
        let u = (c * dx + s * dy) / (e.a * scale);
        let v = (-s * dx + c * dy) / (e.b * scale);
        u * u + v * v <= 1.0
    }

    fn background_at(&self, s: usize, x: f64, y: f64) -> f64 {
        let scale = self.ellipse_scale(s);
        self.ellipses
            .iter()
            .filter(|e| scale > 0.0 && Self::in_ellipse(e, scale, x, y))
            .map(|e| e.intensity)
            .sum()
    }

    fn pixel_centre(idx: usize) -> f64 {
        idx as f64 + 0.5
    }

    fn flat(&self, s: usize, y: usize, x: usize) -> usize {
        (s * self.height + y) * self.width + x
    }

    /// Voxels inside lesion `i`.
    pub fn lesion_roi(&self, i: usize) -> Result<Roi> {
        let l = self.lesions.get(i).ok_or_else(|| TgdError::InvalidArgument(format!("no lesion {i}")))?;
        let mut idx = Vec::new();
        for s in 0..self.slices {
            let r = self.lesion_radius(l, s);
            for y in 0..self.height {
                for x in 0..self.width {
                    let (dx, dy) = (Self::pixel_centre(x) - l.cx, Self::pixel_centre(y) - l.cy);
                    if r > 0.0 && dx * dx + dy * dy <= r * r {
                        idx.push(self.flat(s, y, x));
                    }
                }
            }
        }
        Roi::new(RoiKind::Lesion, idx)
    }

    /// Voxels inside ellipse `i` (scaled per slice) that keep a `margin`
    /// pixel distance from every lesion and disk, from the ellipse edge and
    /// from every ellipse drawn after it.
    pub fn background_roi(&self, ellipse: usize, margin: f64) -> Result<Roi> {
        let e = self
            .ellipses
            .get(ellipse)
            .ok_or_else(|| TgdError::InvalidArgument(format!("no ellipse {ellipse}")))?;
        let shrunk = Ellipse {
            a: (e.a - margin).max(0.5),
            b: (e.b - margin).max(0.5),
            ..e.clone()
        };
        let grown: Vec<_> = self.ellipses[ellipse + 1..]
            .iter()
            .map(|o| Ellipse { a: o.a + margin, b: o.b + margin, ..o.clone() })
            .collect();
        let mut idx = Vec::new();
        for s in 0..self.slices {
            let scale = self.ellipse_scale(s);
            for y in 0..self.height {
                for x in 0..self.width {
                    let (px, py) = (Self::pixel_centre(x), Self::pixel_centre(y));
                    if scale <= 0.0 || !Self::in_ellipse(&shrunk, scale, px, py) {
                        continue;
                    }
                    let near = |cx: f64, cy: f64, r: f64| (px - cx).powi(2) + (py - cy).powi(2) <= (r + margin).powi(2);
                    let covered = grown.iter().any(|g| Self::in_ellipse(g, scale, px, py));
                    if covered || self.lesions.iter().any(|l| near(l.cx, l.cy, l.radius)) || self.disks.iter().any(|d| near(d.cx, d.cy, d.radius)) {
                        continue;
                    }
                    idx.push(self.flat(s, y, x));
                }
            }
        }
        Roi::new(RoiKind::Background, idx)
    }

    /// Voxels inside disk `i`, grown by `margin` pixels.
    pub fn disk_roi(&self, i: usize, margin: f64) -> Result<Roi> {
        let d = self.disks.get(i).ok_or_else(|| TgdError::InvalidArgument(format!("no disk {i}")))?;
        let r = d.radius + margin;
        let mut idx = Vec::new();
        for s in 0..self.slices {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (dx, dy) = (Self::pixel_centre(x) - d.cx, Self::pixel_centre(y) - d.cy);
                    if dx * dx + dy * dy <= r * r {
                        idx.push(self.flat(s, y, x));
                    }
                }
            }
        }
        Roi::new(RoiKind::Lesion, idx)
    }
}

/// Rasterizes `spec` into an `[S, H, W]` activity volume: ellipses add,
/// lesions replace the local background by `contrast ×` its value at the
/// lesion centre, disks replace by their absolute intensity.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (s_n, h, w) = (spec.slices, spec.height, spec.width);
    let mut out = vec![0.0f32; s_n * h * w];
    for s in 0..s_n {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (PhantomSpec::pixel_centre(x), PhantomSpec::pixel_centre(y));
                let mut v = spec.background_at(s, px, py);
                for l in &spec.lesions {
                    let r = spec.lesion_radius(l, s);
                    if r > 0.0 && (px - l.cx).powi(2) + (py - l.cy).powi(2) <= r * r {
                        v = l.contrast * spec.background_at(s, l.cx, l.cy);
                    }
                }
                for d in &spec.disks {
                    if (px - d.cx).powi(2) + (py - d.cy).powi(2) <= d.radius * d.radius {
                        v = d.intensity;
                    }
                }
                out[spec.flat(s, y, x)] = v as f32;
            }
        }
    }
    Tensor::new(vec![s_n, h, w], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanProtocol {
    /// Reconstruction PSF, standard deviation in pixels.
    pub psf_sigma: f64,
    /// Expected total counts per slice.
    pub count_budget: f64,
    pub seed: u64,
}

impl ScanProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.psf_sigma > 0.0) {
            return Err(TgdError::Config(format!("psf_sigma must be > 0, got {}", self.psf_sigma)));
        }
        if !(self.count_budget > 0.0) || !self.count_budget.is_finite() {
            return Err(TgdError::Config(format!("count_budget must be > 0, got {}", self.count_budget)));
        }
        Ok(())
    }
}

/// Nonnegative integer counts with a shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountImage {
    shape: Vec<usize>,
    counts: Vec<u64>,
}

impl CountImage {
    pub fn new(shape: Vec<usize>, counts: Vec<u64>) -> Result<Self> {
        if shape.iter().product::<usize>() != counts.len() {
            return Err(TgdError::shape("CountImage", format!("{shape:?}"), counts.len()));
        }
        Ok(Self { shape, counts })
    }

    /// Rejects negative, fractional or non-finite values.
    pub fn from_tensor<T: crate::tensor::Scalar>(t: &Tensor<T>) -> Result<Self> {
        let counts = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let v = v.to_f64();
                if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                    Ok(v as u64)
                } else {
                    Err(TgdError::InvalidArgument(format!("count image entry {i} is not a nonnegative integer: {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.shape().to_vec(), counts)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(self.shape.clone(), self.counts.iter().map(|&c| c as f64).collect()).expect("shape checked")
    }
}

/// Result of one simulated acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub counts: CountImage,
    /// Counts per unit activity, per slice (0 for empty slices).
    pub scales: Vec<f64>,
    /// Reconstructed image in activity units.
    pub image: Tensor<f32>,
}

/// Separable Gaussian blur of each `[H, W]` plane of a `[S, H, W]` volume,
/// replicating edge pixels.
pub fn gaussian_blur(volume: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    let [s_n, h, w] = *volume.shape() else {
        return Err(TgdError::shape("gaussian_blur", "[S, H, W]", format!("{:?}", volume.shape())));
    };
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let src = volume.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for s in 0..s_n {
        let off = s * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[off + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                        t * src[off + y * w + sx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[off + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                        t * tmp[off + sy * w + x]
                    })
                    .sum();
            }
        }
    }
    Tensor::new(volume.shape().to_vec(), out)
}

/// Turns counts back into an activity-unit image: blur with the PSF, then
/// divide by `fraction × scale` of each slice.
pub fn reconstruct(counts: &CountImage, scales: &[f64], fraction: f64, psf_sigma: f64) -> Result<Tensor<f32>> {
    let blurred = gaussian_blur(&counts.to_tensor(), psf_sigma)?;
    let [s_n, h, w] = *blurred.shape() else { unreachable!() };
    if scales.len() != s_n {
        return Err(TgdError::shape("reconstruct", s_n, scales.len()));
    }
    let data = blurred
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = scales[i / (h * w)] * fraction;
            if k > 0.0 { (v / k) as f32 } else { 0.0 }
        })
        .collect();
    Tensor::new(vec![s_n, h, w], data)
}

/// Noise-free expected image of a scan: the PSF-blurred activity.
pub fn expected_image(activity: &Tensor<f32>, psf_sigma: f64) -> Result<Tensor<f32>> {
    Ok(gaussian_blur(&activity.cast(), psf_sigma)?.cast())
}

pub fn slice_scales(activity: &Tensor<f32>, count_budget: f64) -> Result<Vec<f64>> {
    let [s_n, h, w] = *activity.shape() else {
        return Err(TgdError::shape("simulate_scan", "[S, H, W]", format!("{:?}", activity.shape())));
    };
    Ok((0..s_n)
        .map(|s| {
            let total: f64 = activity.data()[s * h * w..(s + 1) * h * w].iter().map(|&v| v as f64).sum();
            if total > 0.0 { count_budget / total } else { 0.0 }
        })
        .collect())
}

pub fn simulate_scan(activity: &Tensor<f32>, protocol: &ScanProtocol) -> Result<Scan> {
    protocol.validate()?;
    if activity.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(TgdError::InvalidArgument("activity must be nonnegative".into()));
    }
    let scales = slice_scales(activity, protocol.count_budget)?;
    let [_, h, w] = *activity.shape() else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let counts = activity
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let lambda = a as f64 * scales[i / (h * w)];
            if lambda > 0.0 {
                Poisson::new(lambda).expect("finite positive rate").sample(&mut rng) as u64
            } else {
                0
            }
        })
        .collect();
    let counts = CountImage::new(activity.shape().to_vec(), counts)?;
    let image = reconstruct(&counts, &scales, 1.0, protocol.psf_sigma)?;
    Ok(Scan { counts, scales, image })
}

/// Routes every count to the first half with probability `p`, otherwise to
/// the second. The halves are independent Poisson images with means
/// `p·λ` and `(1-p)·λ` and always sum back to the input.
pub fn thin(counts: &CountImage, p: f64, seed: u64) -> Result<(CountImage, CountImage)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(TgdError::InvalidArgument(format!("thinning probability must be in (0, 1), got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::with_capacity(counts.counts.len());
    let mut second = Vec::with_capacity(counts.counts.len());
    for &n in &counts.counts {
        let k = if n == 0 { 0 } else { Binomial::new(n, p).expect("valid p").sample(&mut rng) };
        first.push(k);
        second.push(n - k);
    }
    Ok((
        CountImage::new(counts.shape.clone(), first)?,
        CountImage::new(counts.shape.clone(), second)?,
    ))
}

/// One noisy input / high-count target pair at a given count level.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub phantom: usize,
    /// Fraction of the target budget used for the input.
    pub level: f64,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    /// Noise-free expected image (blurred activity).
    pub truth: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<TrainPair>,
    pub val: Vec<TrainPair>,
}

/// Per phantom: a target scan at the protocol budget, and one input per
/// count level thinned from the target's counts. The last `val_phantoms`
/// phantoms go to the validation split.
pub fn build_dataset(
    specs: &[PhantomSpec],
    protocol: &ScanProtocol,
    count_levels: &[f64],
    val_phantoms: usize,
) -> Result<Dataset> {
    protocol.validate()?;
    if count_levels.is_empty() {
        return Err(TgdError::Config("count_levels must not be empty".into()));
    }
    if let Some(l) = count_levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
        return Err(TgdError::Config(format!("count levels must be in (0, 1), got {l}")));
    }
    if val_phantoms > specs.len() {
        return Err(TgdError::Config(format!("{val_phantoms} validation phantoms requested but only {} exist", specs.len())));
    }
    let n_train = specs.len() - val_phantoms;
    let mut ds = Dataset::default();
    for (pi, spec) in specs.iter().enumerate() {
        let activity = generate_phantom(spec)?;
        let truth = expected_image(&activity, protocol.psf_sigma)?;
        let target_protocol = ScanProtocol {
            seed: derive_seed(protocol.seed, &[pi as u64, spec.seed]),
            ..protocol.clone()
        };
        let target = simulate_scan(&activity, &target_protocol)?;
        for (li, &level) in count_levels.iter().enumerate() {
            let (part, _) = thin(&target.counts, level, derive_seed(target_protocol.seed, &[li as u64 + 1]))?;
            let input = reconstruct(&part, &target.scales, level, protocol.psf_sigma)?;
            let pair = TrainPair {
                phantom: pi,
                level,
                input,
                target: target.image.clone(),
                truth: truth.clone(),
            };
            if pi < n_train {
                ds.train.push(pair);
            } else {
                ds.val.push(pair);
            }
        }
    }
    Ok(ds)
}

/// A test acquisition: ground truth, independent noise realizations for
/// ensemble metrics, and an equal-count split of one acquisition for
/// Noise2Noise adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub spec: PhantomSpec,
    pub protocol: ScanProtocol,
    pub activity: Tensor<f32>,
    pub truth: Tensor<f32>,
    /// Independent scans at the protocol budget.
    pub realizations: Vec<Tensor<f32>>,
    /// Full acquisition at twice the budget that the N2N halves come from.
    pub acquisition: Tensor<f32>,
    pub n2n_halves: (Tensor<f32>, Tensor<f32>),
}

pub fn generate_study(spec: &PhantomSpec, protocol: &ScanProtocol, realizations: usize) -> Result<Study> {
    protocol.validate()?;
    let activity = generate_phantom(spec)?;
    let truth = expected_image(&activity, protocol.psf_sigma)?;
    let reals = (0..realizations)
        .map(|r| {
            let p = ScanProtocol {
                seed: derive_seed(protocol.seed, &[1, r as u64]),
                ..protocol.clone()
            };
            simulate_scan(&activity, &p).map(|s| s.image)
        })
        .collect::<Result<Vec<_>>>()?;
    let full = simulate_scan(
        &activity,
        &ScanProtocol {
            count_budget: 2.0 * protocol.count_budget,
            seed: derive_seed(protocol.seed, &[2]),
            ..protocol.clone()
        },
    )?;
    let (a, b) = thin(&full.counts, 0.5, derive_seed(protocol.seed, &[3]))?;
    let halves = (
        reconstruct(&a, &full.scales, 0.5, protocol.psf_sigma)?,
        reconstruct(&b, &full.scales, 0.5, protocol.psf_sigma)?,
    );
    Ok(Study {
        spec: spec.clone(),
        protocol: protocol.clone(),
        activity,
        truth,
        realizations: reals,
        acquisition: full.image,
        n2n_halves: halves,
    })
}

/// A study whose every realization, acquisition and half equals the
/// noise-free expected image.
pub fn noiseless_study(spec: &PhantomSpec, protocol: &ScanProtocol, realizations: usize) -> Result<Study> {
    protocol.validate()?;
    let activity = generate_phantom(spec)?;
    let truth = expected_image(&activity, protocol.psf_sigma)?;
    Ok(Study {
        spec: spec.clone(),
        protocol: protocol.clone(),
        realizations: vec![truth.clone(); realizations],
        acquisition: truth.clone(),
        n2n_halves: (truth.clone(), truth.clone()),
        activity,
        truth,
    })
}

/// Mean lag-1 (horizontal) autocorrelation of `noisy - clean` over each
/// slice's pixels where `clean > 0`.
pub fn lag1_autocorrelation(noisy: &Tensor<f32>, clean: &Tensor<f32>) -> Result<f64> {
    let [s_n, h, w] = *noisy.shape() else {
        return Err(TgdError::shape("lag1_autocorrelation", "[S, H, W]", format!("{:?}", noisy.shape())));
    };
    if clean.shape() != noisy.shape() {
        return Err(TgdError::shape("lag1_autocorrelation", format!("{:?}", noisy.shape()), format!("{:?}", clean.shape())));
    }
    let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(&a, &b)| (a - b) as f64).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for s in 0..s_n {
        for y in 0..h {
            for x in 0..w {
                let i = (s * h + y) * w + x;
                if clean[i] <= 0.0 {
                    continue;
                }
                den += r[i] * r[i];
                if x + 1 < w && clean[i + 1] > 0.0 {
                    num += r[i] * r[i + 1];
                }
            }
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
