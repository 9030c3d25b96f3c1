//! Training objectives.
//!
//! Loss functions with a `_per_example` suffix return `[B]` vectors so that the
//! gated expert loss can weight each slice by its own gate; the plain versions
//! average them. All squared norms are means.

use moediff_tensor::{Conv2dOpts, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MoeError, Result};
use crate::nn::{depthwise_fixed, mean_per_example, pad_replicate};

pub const TEMPERATURE_FLOOR: f64 = 1e-3;
pub const LOG_GUARD: f64 = 1e-12;
pub const MAD_SCALE: f64 = 1.4826;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const MAX_WEIGHT: f64 = 1e3;

fn check_same<'t>(a: Var<'t>, b: Var<'t>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MoeError::Contract(format!("{op}: shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.shape().len() != 4 {
        return Err(MoeError::Contract(format!("{op}: expected [B,C,H,W], got {:?}", a.shape())));
    }
    Ok(())
}

/// Per-example mean squared difference.
pub fn mse_per_example<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() || a.shape().is_empty() {
        return Err(MoeError::Contract(format!("mse: shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    mean_per_example(a.sub(&b)?.square()?)
}

/// Noise-prediction loss.
pub fn diffusion_loss<'t>(eps_hat: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    Ok(mse_per_example(eps_hat, eps)?.mean()?)
}

/// Fixed, non-learned multi-scale filter pyramid standing in for a learned
/// perceptual feature extractor. Each level applies a 5x5 Gaussian, a 3x3
/// Laplacian and four oriented 3x3 edge filters to every channel with
/// replicated borders; the next level sees the Gaussian output average-pooled by 2.
#[derive(Clone, Debug)]
pub struct FixedPerceptualBank {
    pub levels: usize,
    gaussian: Tensor,
    filters: Vec<Tensor>,
}

impl Default for FixedPerceptualBank {
    fn default() -> Self {
        Self::new()
    }
}

impl FixedPerceptualBank {
    pub fn new() -> Self {
        let g1: Vec<f64> = (-2i32..=2).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = g1.iter().sum();
        let gaussian = Tensor::from_fn([5, 5], |k| g1[k / 5] * g1[k % 5] / (s * s));
        let k3 = |v: [f64; 9]| Tensor::new([3, 3], v.to_vec()).expect("3x3");
        let filters = vec![
            k3([0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]),
            k3([-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]),
            k3([-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]),
            k3([0.0, 1.0, 2.0, -1.0, 0.0, 1.0, -2.0, -1.0, 0.0]),
            k3([-2.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 2.0]),
        ];
        Self { levels: 3, gaussian, filters }
    }

    /// SHA-256 over every coefficient, for pinning the bank across builds.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in std::iter::once(&self.gaussian).chain(&self.filters) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.update((self.levels as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Feature maps of every level, `levels × 6` tensors of the input's shape class.
    pub fn features<'t>(&self, x: Var<'t>) -> Result<Vec<Vec<Var<'t>>>> {
        let same = Conv2dOpts::default();
        let mut out = Vec::with_capacity(self.levels);
        let mut cur = x;
        for level in 0..self.levels {
            let blurred = depthwise_fixed(pad_replicate(cur, 2)?, &self.gaussian, same)?;
            let padded = pad_replicate(cur, 1)?;
            let mut feats = vec![blurred];
            for f in &self.filters {
                feats.push(depthwise_fixed(padded, f, same)?);
            }
            out.push(feats);
            if level + 1 < self.levels {
                let pool = Tensor::full([2, 2], 0.25);
                let n = blurred.shape().len();
                if blurred.shape()[n - 1] < 2 || blurred.shape()[n - 2] < 2 {
                    return Err(MoeError::Contract("perceptual pyramid needs at least 2x2 per level".into()));
                }
                cur = depthwise_fixed(blurred, &pool, Conv2dOpts::new(2, 0, 1))?;
            }
        }
        Ok(out)
    }

    /// `Σ_levels Σ_features mse(Φ(a), Φ(b))` per example.
    pub fn distance_per_example<'t>(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Var<'t>> = None;
        for (la, lb) in fa.into_iter().zip(fb) {
            for (u, v) in la.into_iter().zip(lb) {
                let d = mse_per_example(u, v)?;
                total = Some(match total {
                    Some(t) => t.add(&d)?,
                    None => d,
                });
            }
        }
        total.ok_or_else(|| MoeError::Contract("empty perceptual bank".into()))
    }
}

/// Latent MSE plus filter-bank feature distance.
pub fn task1_per_example<'t>(bank: &FixedPerceptualBank, z0: Var<'t>, z_hat: Var<'t>) -> Result<Var<'t>> {
    check_same(z0, z_hat, "task1")?;
    Ok(mse_per_example(z0, z_hat)?.add(&bank.distance_per_example(z0, z_hat)?)?)
}

/// Sobel x/y kernels.
pub fn sobel_kernels() -> [Tensor; 2] {
    [
        Tensor::new([3, 3], vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]).expect("3x3"),
        Tensor::new([3, 3], vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]).expect("3x3"),
    ]
}

/// Mean squared Sobel-gradient difference (both directions, replicated borders).
pub fn sobel_term_per_example<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let diff = a.sub(&b)?;
    let padded = pad_replicate(diff, 1)?;
    let [kx, ky] = sobel_kernels();
    let gx = depthwise_fixed(padded, &kx, Conv2dOpts::default())?;
    let gy = depthwise_fixed(padded, &ky, Conv2dOpts::default())?;
    Ok(mean_per_example(gx.square()?)?.add(&mean_per_example(gy.square()?)?)?)
}

/// `Σ_bins |F(a) − F(b)|² / (H·W·n)` per example, where `n` is the number of
/// values per example. By Parseval this is the mean squared difference of an
/// orthonormally scaled spectrum.
pub fn fourier_term_per_example<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = a.shape();
    let nd = shape.len();
    let hw = (shape[nd - 2] * shape[nd - 1]) as f64;
    let f = a.sub(&b)?.dft2()?;
    let power = f.re.square()?.add(&f.im.square()?)?;
    Ok(mean_per_example(power)?.scale(1.0 / hw)?)
}

/// Edge-aware plus frequency-domain loss.
pub fn task2_per_example<'t>(z0: Var<'t>, z_hat: Var<'t>) -> Result<Var<'t>> {
    check_same(z0, z_hat, "task2")?;
    Ok(sobel_term_per_example(z0, z_hat)?.add(&fourier_term_per_example(z0, z_hat)?)?)
}

/// Sum over window sizes and window positions of the Hann-windowed spectral
/// difference, each window normalized like [`fourier_term_per_example`].
/// Windows hop by half their size.
pub fn task3_per_example<'t>(z0: Var<'t>, z_hat: Var<'t>, windows: &[usize]) -> Result<Var<'t>> {
    check_same(z0, z_hat, "task3")?;
    let shape = z0.shape();
    let (h, w) = (shape[2], shape[3]);
    if let Some(&bad) = windows.iter().find(|&&s| s > h || s > w || s == 0) {
        return Err(MoeError::Config(format!("STFT window {bad} does not fit latent {h}x{w}")));
    }
    let diff = z0.sub(&z_hat)?;
    let mut total: Option<Var<'t>> = None;
    for &win in windows {
        for (_, spec) in diff.stft2(win, (win / 2).max(1))? {
            let power = spec.re.square()?.add(&spec.im.square()?)?;
            let term = mean_per_example(power)?.scale(1.0 / (win * win) as f64)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| MoeError::Config("no STFT windows configured".into()))
}

pub fn task1_perceptual<'t>(bank: &FixedPerceptualBank, z0: Var<'t>, z_hat: Var<'t>) -> Result<Var<'t>> {
    Ok(task1_per_example(bank, z0, z_hat)?.mean()?)
}

pub fn task2_edge_freq<'t>(z0: Var<'t>, z_hat: Var<'t>) -> Result<Var<'t>> {
    Ok(task2_per_example(z0, z_hat)?.mean()?)
}

pub fn task3_stft<'t>(z0: Var<'t>, z_hat: Var<'t>, windows: &[usize]) -> Result<Var<'t>> {
    Ok(task3_per_example(z0, z_hat, windows)?.mean()?)
}

/// `mean_b Σ_i G[b,i]·L_i[b]` from a `[B, K]` gate and `K` per-example losses.
pub fn expert_losses<'t>(g: Var<'t>, per_expert: &[Var<'t>]) -> Result<Var<'t>> {
    let gs = g.shape();
    if gs.len() != 2 || gs[1] != per_expert.len() {
        return Err(MoeError::Contract(format!("gate {gs:?} for {} expert losses", per_expert.len())));
    }
    let b = gs[0];
    let stacked = Var::concat(
        &per_expert.iter().map(|l| l.reshape([b, 1])).collect::<moediff_tensor::Result<Vec<_>>>()?,
        1,
    )?;
    Ok(g.mul(&stacked)?.sum_axis(1)?.mean()?)
}

/// Median with the two central values averaged for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MoeError::Contract("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// `max(1.4826·MAD(values), 1e-3)`.
pub fn mad_temperature(values: &[f64]) -> Result<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    Ok((MAD_SCALE * median(&dev)?).max(TEMPERATURE_FLOOR))
}

/// `softmax_i(cos_i / T)` over the last axis.
pub fn supervised_gate_targets(cos: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(MoeError::Contract(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(moediff_tensor::softmax_last(&cos.scale(1.0 / temperature))?)
}

/// Cosine between each example's flattened expert estimate and its target: `[B, K]`.
pub fn estimate_cosines(z0: &Tensor, estimates: &[Tensor]) -> Result<Tensor> {
    let b = z0.shape()[0];
    let per = z0.numel() / b;
    let k = estimates.len();
    let mut out = Tensor::zeros([b, k]);
    for (i, e) in estimates.iter().enumerate() {
        if e.shape() != z0.shape() {
            return Err(MoeError::Contract(format!("estimate {:?} vs target {:?}", e.shape(), z0.shape())));
        }
        for bi in 0..b {
            let r = bi * per..(bi + 1) * per;
            out.data_mut()[bi * k + i] = moediff_tensor::cosine(&e.data()[r.clone()], &z0.data()[r]);
        }
    }
    Ok(out)
}

/// `−(1/K)·Σ_i G*_i·log(G_i + 1e-12)`, averaged over the batch.
pub fn supervised_gating_term<'t>(g: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let k = *g.shape().last().ok_or_else(|| MoeError::Contract("scalar gate".into()))?;
    let b = g.numel() / k;
    let t = g.tape().constant(target.clone());
    let ce = g.add_scalar(LOG_GUARD)?.ln()?.mul(&t)?.sum()?;
    Ok(ce.scale(-1.0 / (k as f64 * b as f64))?)
}

/// `log(1 + (1/K)·Σ_i max_{j≠i} cos(ẑ_i, ẑ_j))` on whole-batch flattened estimates.
pub fn diversity_term<'t>(estimates: &[Var<'t>]) -> Result<Var<'t>> {
    let k = estimates.len();
    if k < 2 {
        return Err(MoeError::Contract("diversity needs at least two experts".into()));
    }
    let mut cos = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = estimates[i].cosine_similarity(&estimates[j])?;
            cos[i][j] = Some(c);
            cos[j][i] = Some(c);
        }
    }
    let mut sum: Option<Var<'t>> = None;
    for row in &cos {
        let best = row
            .iter()
            .flatten()
            .copied()
            .max_by(|a, b| a.item().unwrap_or(f64::NAN).total_cmp(&b.item().unwrap_or(f64::NAN)))
            .expect("k >= 2");
        sum = Some(match sum {
            Some(s) => s.add(&best)?,
            None => best,
        });
    }
    Ok(sum.expect("k >= 2").scale(1.0 / k as f64)?.add_scalar(1.0)?.ln()?)
}

/// Supervised term plus diversity term.
pub fn gating_loss<'t>(g: Var<'t>, target: &Tensor, estimates: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    Ok((supervised_gating_term(g, target)?, diversity_term(estimates)?))
}

/// EMA estimate of the gating-loss variance and the derived loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTracker {
    pub decay: f64,
    pub mean: f64,
    pub second_moment: f64,
    pub initialized: bool,
}

impl Default for VarianceTracker {
    fn default() -> Self {
        Self { decay: 0.99, mean: 0.0, second_moment: 1.0, initialized: false }
    }
}

impl VarianceTracker {
    pub fn variance(&self) -> f64 {
        (self.second_moment - self.mean * self.mean).max(0.0)
    }

    pub fn weight(&self) -> f64 {
        (1.0 / self.variance().max(VARIANCE_FLOOR)).min(MAX_WEIGHT)
    }

    /// Folds in one gating-loss value and returns the new weight. The first
    /// call seeds the mean with the value and the variance with the unit prior.
    pub fn update(&mut self, value: f64) -> f64 {
        if !self.initialized {
            self.mean = value;
            self.second_moment = value * value + 1.0;
            self.initialized = true;
        } else {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * value;
            self.second_moment = self.decay * self.second_moment + (1.0 - self.decay) * value * value;
        }
        self.weight()
    }
}

/// `L_E + w·L_gating` with `w` a constant.
pub fn total_loss<'t>(l_e: Var<'t>, l_gating: Var<'t>, w: f64) -> Result<Var<'t>> {
    Ok(l_e.add(&l_gating.scale(w)?)?)
}

/// One training step's loss values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub diffusion: Vec<f64>,
    pub task: Vec<f64>,
    pub expert_loss: f64,
    pub supervised: f64,
    pub diversity: f64,
    pub gating_loss: f64,
    pub weight: f64,
    pub total: f64,
    pub temperature: f64,
    /// Batch-mean gate per expert.
    pub gates: Vec<f64>,
    pub usage: Vec<f64>,
}

impl LossReport {
    pub fn csv_header(experts: usize) -> String {
        let mut cols = vec!["step".to_string(), "epoch".into(), "lr".into()];
        for i in 1..=experts {
            cols.push(format!("diffusion_{i}"));
            cols.push(format!("task_{i}"));
        }
        cols.extend(
            ["expert_loss", "supervised", "diversity", "gating_loss", "weight", "total", "temperature"]
                .map(String::from),
        );
        cols.extend((1..=experts).map(|i| format!("gate_{i}")));
        cols.extend((1..=experts).map(|i| format!("usage_{i}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.epoch.to_string(), format!("{:e}", self.lr)];
        for (d, t) in self.diffusion.iter().zip(&self.task) {
            cols.push(format!("{d:.9e}"));
            cols.push(format!("{t:.9e}"));
        }
        for v in [
            self.expert_loss,
            self.supervised,
            self.diversity,
            self.gating_loss,
            self.weight,
            self.total,
            self.temperature,
        ] {
            cols.push(format!("{v:.9e}"));
        }
        cols.extend(self.gates.iter().chain(&self.usage).map(|v| format!("{v:.9e}")));
        cols.join(",")
    }

    pub fn is_finite(&self) -> bool {
        self.diffusion
            .iter()
            .chain(&self.task)
            .chain([&self.expert_loss, &self.gating_loss, &self.weight, &self.total])
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mad_examples() {
        assert!((mad_temperature(&[0.2, 0.5, 0.8]).unwrap() - 0.44478).abs() < 1e-5);
        assert!((mad_temperature(&[0.1, 0.2, 0.8, 0.9]).unwrap() - 0.51891).abs() < 1e-5);
        assert_eq!(mad_temperature(&[0.4; 5]).unwrap(), TEMPERATURE_FLOOR);
        assert!(mad_temperature(&[]).is_err());
    }

    #[test]
    fn tracker_prior_and_clamp() {
        let mut t = VarianceTracker::default();
        assert_eq!(t.update(0.7), 1.0);
        for _ in 0..5000 {
            t.update(0.7);
        }
        assert_eq!(t.weight(), MAX_WEIGHT);
    }

    #[test]
    fn csv_row_matches_header() {
        let r = LossReport { diffusion: vec![0.0; 3], task: vec![0.0; 3], gates: vec![0.0; 3], usage: vec![0.0; 3], ..Default::default() };
        assert_eq!(r.csv_row().split(',').count(), LossReport::csv_header(3).split(',').count());
    }
}
