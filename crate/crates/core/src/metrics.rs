//! Image quality metrics on `[0, 1]` intensities.

use moediff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MoeError::Contract(format!("metric on shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64)
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB) })
}

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights) of the trailing
/// two axes of each slice, with `K1 = 0.01`, `K2 = 0.03` and peak 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    const WIN: usize = 8;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = a.ndim();
    if n < 2 {
        return Err(MoeError::Contract("ssim needs at least two axes".into()));
    }
    let (h, w) = (a.shape()[n - 2], a.shape()[n - 1]);
    if h < WIN || w < WIN {
        return Err(MoeError::Contract(format!("ssim window {WIN} exceeds image {h}x{w}")));
    }
    let planes = a.numel() / (h * w);
    let area = (WIN * WIN) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..planes {
        let (pa, pb) = (&a.data()[p * h * w..(p + 1) * h * w], &b.data()[p * h * w..(p + 1) * h * w]);
        for r in 0..=h - WIN {
            for c in 0..=w - WIN {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in r..r + WIN {
                    for x in c..c + WIN {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / area, sb / area);
                let va = saa / area - ma * ma;
                let vb = sbb / area - mb * mb;
                let cov = sab / area - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

impl QualityReport {
    pub fn measure(pred: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(Self { psnr: psnr(pred, target)?, ssim: ssim(pred, target)?, rmse: rmse(pred, target)? })
    }

    /// Componentwise mean of several reports.
    pub fn mean(reports: &[QualityReport]) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let x = Tensor::from_fn([1, 10, 10], |i| (i as f64 * 0.1).sin().abs());
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn psnr_of_uniform_offset() {
        let x = Tensor::zeros([1, 8, 8]);
        let y = Tensor::full([1, 8, 8], 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    }
}
