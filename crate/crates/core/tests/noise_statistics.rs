use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use tgd_core::phantom::{expected_image, generate_phantom, simulate_scan, thin, CountImage, PhantomSpec, ScanProtocol};

const PIXELS: usize = 10_000;

fn poisson_image(lambda: f64, seed: u64) -> CountImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Poisson::new(lambda).unwrap();
    CountImage::new(vec![1, 100, 100], (0..PIXELS).map(|_| d.sample(&mut rng) as u64).collect()).unwrap()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn thinned_total_is_binomial() {
    let counts = CountImage::new(vec![1, 100, 100], vec![100; PIXELS]).unwrap();
    let n = counts.total() as f64;
    assert_eq!(n, 1e6);
    for (i, p) in [0.05, 0.3, 0.5, 0.9].into_iter().enumerate() {
        let (a, _) = thin(&counts, p, 40 + i as u64).unwrap();
        let sd = (n * p * (1.0 - p)).sqrt();
        let z = (a.total() as f64 - n * p) / sd;
        assert!(z.abs() < 3.0, "p {p}: z = {z}");
    }
}

#[test]
fn thinned_poisson_halves_are_poisson_and_uncorrelated() {
    let lambda = 100.0;
    let counts = poisson_image(lambda, 1);
    assert!((counts.total() as f64 - 1e6).abs() < 5e3);
    for (i, p) in [0.1, 0.5, 0.75].into_iter().enumerate() {
        let (a, b) = thin(&counts, p, 50 + i as u64).unwrap();
        let av: Vec<f64> = a.counts().iter().map(|&c| c as f64).collect();
        let bv: Vec<f64> = b.counts().iter().map(|&c| c as f64).collect();
        let n = PIXELS as f64;
        let mu = p * lambda;
        let (m, v) = mean_var(&av);
        assert!(((m - mu) / (mu / n).sqrt()).abs() < 3.0, "p {p}: mean {m} vs {mu}");
        // Var(s²) ≈ σ⁴ (2/(n-1) + excess kurtosis / n), excess kurtosis 1/μ.
        let sd_var = mu * (2.0 / (n - 1.0) + 1.0 / (mu * n)).sqrt();
        assert!(((v - mu) / sd_var).abs() < 3.0, "p {p}: var {v} vs {mu}");
        let (mb, vb) = mean_var(&bv);
        let cov = av.iter().zip(&bv).map(|(x, y)| (x - m) * (y - mb)).sum::<f64>() / (n - 1.0);
        let corr = cov / (v * vb).sqrt();
        assert!(corr.abs() < 3.0 / n.sqrt(), "p {p}: correlation {corr}");
    }
}

#[test]
fn scan_average_converges_to_expected_image() {
    let spec = PhantomSpec::random(16, 16, 1, 3);
    let activity = generate_phantom(&spec).unwrap();
    let expected = expected_image(&activity, 1.0).unwrap();
    let draws = 1000;
    let px = expected.numel();
    let (mut sum, mut sq) = (vec![0.0f64; px], vec![0.0f64; px]);
    for r in 0..draws {
        let scan = simulate_scan(&activity, &ScanProtocol { psf_sigma: 1.0, count_budget: 2e3, seed: r }).unwrap();
        for (j, &v) in scan.image.data().iter().enumerate() {
            sum[j] += v as f64;
            sq[j] += (v as f64).powi(2);
        }
    }
    let r = draws as f64;
    for j in 0..px {
        let m = sum[j] / r;
        let sd = ((sq[j] / r - m * m) * r / (r - 1.0)).sqrt();
        let e = expected.data()[j] as f64;
        if sd == 0.0 {
            assert!((m - e).abs() < 1e-6);
            continue;
        }
        // Bonferroni over the 256 pixels.
        let z = (m - e) / (sd / r.sqrt());
        assert!(z.abs() < 4.5, "pixel {j}: mean {m} expected {e} z {z}");
    }
}

proptest! {
    #[test]
    fn thinning_conserves_counts(counts in prop::collection::vec(0u64..10_000, 1..200), p in 0.001f64..0.999, seed: u64) {
        let n = counts.len();
        let img = CountImage::new(vec![1, 1, n], counts.clone()).unwrap();
        let (a, b) = thin(&img, p, seed).unwrap();
        for j in 0..n {
            prop_assert_eq!(a.counts()[j] + b.counts()[j], counts[j]);
        }
        prop_assert_eq!(thin(&img, p, seed).unwrap(), (a, b));
    }
}
