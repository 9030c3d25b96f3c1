//! Quality metrics against naive per-pixel references.

use moediff_core::metrics::*;
use moediff_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_mse(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.numel() {
        s += (a.data()[i] - b.data()[i]).powi(2);
    }
    s / a.numel() as f64
}

/// Per-window SSIM with two-pass mean/variance.
fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let (c1, c2) = (1e-4, 9e-4);
    let mut vals = Vec::new();
    for r in 0..=h - 8 {
        for c in 0..=w - 8 {
            let px = |t: &Tensor| -> Vec<f64> {
                (r..r + 8).flat_map(|y| (c..c + 8).map(move |x| (y, x))).map(|(y, x)| t.data()[y * w + x]).collect()
            };
            let (u, v) = (px(a), px(b));
            let mu = u.iter().sum::<f64>() / 64.0;
            let mv = v.iter().sum::<f64>() / 64.0;
            let vu = u.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 64.0;
            let vv = v.iter().map(|x| (x - mv).powi(2)).sum::<f64>() / 64.0;
            let cov = u.iter().zip(&v).map(|(x, y)| (x - mu) * (y - mv)).sum::<f64>() / 64.0;
            vals.push(((2.0 * mu * mv + c1) * (2.0 * cov + c2)) / ((mu * mu + mv * mv + c1) * (vu + vv + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn uniform_offset_of_a_tenth_is_twenty_db() {
    let a = Tensor::full([1, 16, 16], 0.3);
    let b = Tensor::full([1, 16, 16], 0.4);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn identical_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_fn([1, 16, 16], |_| rng.random_range(0.0..1.0));
    let q = QualityReport::measure(&a, &a).unwrap();
    assert_eq!(q.psnr, PSNR_CAP_DB);
    assert_eq!(q.rmse, 0.0);
    assert!((q.ssim - 1.0).abs() < 1e-12);
    assert!(psnr(&a, &Tensor::zeros([16, 16])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_match_naive_references(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn([1, 12, 14], |_| rng.random_range(0.0..1.0));
        let b = Tensor::from_fn([1, 12, 14], |_| rng.random_range(0.0..1.0));
        let m = naive_mse(&a, &b);
        prop_assert!((mse(&a, &b).unwrap() - m).abs() < 1e-12);
        prop_assert!((rmse(&a, &b).unwrap() - m.sqrt()).abs() < 1e-12);
        prop_assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
        prop_assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
    }
}
