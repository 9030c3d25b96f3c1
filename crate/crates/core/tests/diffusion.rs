//! Schedule algebra: noising and clean-latent estimation invert each other,
//! the noised variance follows the schedule, aggregation is a convex combination.

use moediff_core::diffusion::*;
use moediff_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedules() -> Vec<NoiseSchedule> {
    DESK_STEPS.iter().chain(&PAPER_STEPS).map(|&t| NoiseSchedule::linear(t).unwrap()).collect()
}

#[test]
fn estimate_inverts_noising_at_every_timestep() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Tensor::from_fn([2, 16, 16], |_| rng.random_range(-1.5..1.5));
    for s in schedules() {
        let mut worst = 0.0f64;
        for t in 1..=s.steps() {
            let (zt, eps) = s.forward_noise(&z0, t, &mut rng).unwrap();
            let back = s.estimate_z0(&zt, &eps, t).unwrap();
            worst = worst.max(back.max_abs_diff(&z0).unwrap());
        }
        assert!(worst < 1e-10, "T = {}: {worst:e}", s.steps());
    }
}

#[test]
fn schedule_shape() {
    for s in schedules() {
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1) - BETA_START).abs() < 1e-15);
        assert!((s.beta(s.steps()) - BETA_END).abs() < 1e-15);
        assert!((1..=s.steps()).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        let amp = s.max_amplification();
        assert!(amp.is_finite() && amp > 1.0);
        assert!((amp - 1.0 / s.alpha_bar(s.steps()).sqrt()).abs() < 1e-12);
    }
    assert!(NoiseSchedule::linear(0).is_err());
    let s = NoiseSchedule::linear(25).unwrap();
    let z = Tensor::zeros([4]);
    assert!(s.noise_with(&z, &z, 0).is_err());
    assert!(s.noise_with(&z, &z, 26).is_err());
}

#[test]
fn zero_noise_estimate_is_rescaled_input() {
    let s = NoiseSchedule::linear(50).unwrap();
    let zt = Tensor::from_fn([8], |i| i as f64 - 3.0);
    for t in [1, 17, 50] {
        let est = s.estimate_z0(&zt, &Tensor::zeros([8]), t).unwrap();
        let want = zt.scale(1.0 / s.alpha_bar(t).sqrt());
        assert!(est.max_abs_diff(&want).unwrap() < 1e-14);
    }
}

#[test]
fn noised_variance_follows_the_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = NoiseSchedule::linear(100).unwrap();
    let z0 = Tensor::from_fn([10_000], |_| 2.0 * rng.random_range(-1.0f64..1.0) * 3f64.sqrt());
    let var = |x: &Tensor| {
        let m = x.mean();
        x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.numel() as f64
    };
    let v0 = var(&z0);
    for t in [1, 10, 50, 100] {
        let (zt, _) = s.forward_noise(&z0, t, &mut rng).unwrap();
        let a = s.alpha_bar(t);
        let want = a * v0 + (1.0 - a);
        assert!((var(&zt) - want).abs() < 0.05 * want, "t = {t}: {} vs {want}", var(&zt));
    }
}

#[test]
fn ddim_step_with_exact_estimate_stays_on_the_noise_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = NoiseSchedule::linear(25).unwrap();
    let z0 = Tensor::from_fn([32], |_| rng.random_range(-1.0..1.0));
    let (zt, eps) = s.forward_noise(&z0, 20, &mut rng).unwrap();
    let prev = s.ddim_step(&zt, &z0, 20, 12).unwrap();
    assert!(prev.max_abs_diff(&s.noise_with(&z0, &eps, 12).unwrap()).unwrap() < 1e-12);
    let last = s.ddim_step(&zt, &z0, 20, 0).unwrap();
    assert!(last.max_abs_diff(&z0).unwrap() < 1e-12);
    assert!(s.ddim_step(&zt, &z0, 12, 12).is_err());
}

#[test]
fn aggregation_examples() {
    let c = |v: f64| Tensor::full([2, 2], v);
    let out = aggregate(&[c(1.0), c(2.0), c(3.0)], &[0.21, 0.48, 0.31]).unwrap();
    assert!(out.data().iter().all(|v| (v - 2.10).abs() < 1e-12));
    let hot = aggregate(&[c(1.0), c(2.0), c(3.0)], &[1.0, 0.0, 0.0]).unwrap();
    assert_eq!(hot, c(1.0));
    assert!(aggregate(&[c(1.0)], &[0.5, 0.5]).is_err());
}

proptest! {
    #[test]
    fn aggregate_is_convex(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn([3, 4], |_| rng.random_range(-2.0..2.0))).collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = raw.iter().map(|r| r / raw.iter().sum::<f64>()).collect();
        let out = aggregate(&est, &g).unwrap();
        for i in 0..12 {
            let lo = est.iter().map(|e| e.data()[i]).fold(f64::MAX, f64::min);
            let hi = est.iter().map(|e| e.data()[i]).fold(f64::MIN, f64::max);
            prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
        let same = aggregate(&[est[0].clone(), est[0].clone(), est[0].clone()], &g).unwrap();
        prop_assert!(same.max_abs_diff(&est[0]).unwrap() < 1e-12);
    }
}
