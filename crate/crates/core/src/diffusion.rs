//! Per-expert linear noise schedules, forward noising, clean-latent estimation
//! and gated aggregation.

use moediff_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Chain lengths of the three experts at desk scale (same 1:4:2 ratio as the full-size preset).
pub const DESK_STEPS: [usize; 3] = [25, 100, 50];
pub const PAPER_STEPS: [usize; 3] = [500, 2000, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` betas spaced linearly from `1e-4` to `0.02`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(MoeError::Config("a noise schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let last = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(MoeError::Contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps` with `eps` supplied.
    pub fn noise_with(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(z0.zip_map(eps, |z, e| sa * z + sb * e)?)
    }

    /// Draws `eps ~ N(0, I)` and returns `(z_t, eps)`.
    pub fn forward_noise(&self, z0: &Tensor, t: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        self.check_t(t)?;
        let eps = standard_normal(z0.shape(), rng);
        Ok((self.noise_with(z0, &eps, t)?, eps))
    }

    /// `(z_t − √(1−ᾱ_t)·eps_hat)/√ᾱ_t`.
    pub fn estimate_z0(&self, z_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        if a <= 0.0 {
            return Err(MoeError::Contract(format!("alpha_bar({t}) is zero")));
        }
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(z_t.zip_map(eps_hat, |z, e| (z - sb * e) / sa)?)
    }

    /// Deterministic (η = 0) step from `t` to `t_prev < t` given a clean-latent estimate.
    pub fn ddim_step(&self, z_t: &Tensor, z0_hat: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(MoeError::Contract(format!("reverse step {t} -> {t_prev}")));
        }
        let (a, ap) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let (spa, spb) = (ap.sqrt(), (1.0 - ap).sqrt());
        Ok(z_t.zip_map(z0_hat, |z, z0| {
            let eps = (z - sa * z0) / sb;
            spa * z0 + spb * eps
        })?)
    }

    /// `1/√ᾱ_T`, the worst-case amplification of the clean-latent estimate.
    pub fn max_amplification(&self) -> f64 {
        1.0 / self.alpha_bar(self.steps()).sqrt()
    }
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// `Σ_i G_i·ẑ0_i`, accumulated in expert order.
pub fn aggregate(estimates: &[Tensor], g: &[f64]) -> Result<Tensor> {
    if estimates.len() != g.len() || estimates.is_empty() {
        return Err(MoeError::Contract(format!("{} estimates for {} gate weights", estimates.len(), g.len())));
    }
    let mut out = estimates[0].scale(g[0]);
    for (e, &w) in estimates.iter().zip(g).skip(1) {
        out = out.zip_map(e, |acc, v| acc + w * v)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedules_are_monotone_and_in_range() {
        for steps in DESK_STEPS.into_iter().chain(PAPER_STEPS) {
            let s = NoiseSchedule::linear(steps).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.betas().iter().all(|&b| (BETA_START..=BETA_END).contains(&b)));
            for t in 1..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
            }
        }
    }

    #[test]
    fn timestep_range_is_enforced() {
        let s = NoiseSchedule::linear(25).unwrap();
        let z = Tensor::zeros([2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.forward_noise(&z, 0, &mut rng).is_err());
        assert!(s.forward_noise(&z, 26, &mut rng).is_err());
        assert!(s.forward_noise(&z, 25, &mut rng).is_ok());
    }

    #[test]
    fn zero_noise_estimate() {
        let s = NoiseSchedule::linear(50).unwrap();
        let zt = Tensor::from_fn([3], |i| i as f64 - 1.0);
        let est = s.estimate_z0(&zt, &Tensor::zeros([3]), 50).unwrap();
        let expect = zt.scale(1.0 / s.alpha_bar(50).sqrt());
        assert!(est.max_abs_diff(&expect).unwrap() < 1e-15);
        assert!(s.max_amplification().is_finite());
    }

    #[test]
    fn ddim_step_with_exact_estimate_stays_on_trajectory() {
        let s = NoiseSchedule::linear(100).unwrap();
        let z0 = Tensor::from_fn([4], |i| i as f64 * 0.3);
        let eps = Tensor::from_fn([4], |i| 1.0 - i as f64 * 0.7);
        let zt = s.noise_with(&z0, &eps, 80).unwrap();
        let prev = s.ddim_step(&zt, &z0, 80, 40).unwrap();
        let expect = s.noise_with(&z0, &eps, 40).unwrap();
        assert!(prev.max_abs_diff(&expect).unwrap() < 1e-12);
        let end = s.ddim_step(&zt, &z0, 80, 0).unwrap();
        assert!(end.max_abs_diff(&z0).unwrap() < 1e-12);
    }
}
