//! Discrete Fourier transforms over the two trailing axes, and the windowed
//! (short-time) variant built on top of them.
//!
//! Transforms are direct O(n²) matrix products per axis. A real input `x`
//! transforms as `X = F_H x F_W` with `F = C − iS`, so the real and imaginary
//! parts are sums of four real separable products, each differentiable.

use std::f64::consts::PI;

use crate::error::{dim_err, Result};
use crate::linalg::gemm;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Real and imaginary planes of a spectrum, equal shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexGrid {
    pub fn magnitude(&self) -> Tensor {
        self.re
            .zip_map(&self.im, |a, b| (a * a + b * b).sqrt())
            .expect("ComplexGrid planes share a shape")
    }

    pub fn energy(&self) -> f64 {
        self.re.sum_sq() + self.im.sum_sq()
    }
}

/// Recorded counterpart of [`ComplexGrid`].
#[derive(Clone, Copy, Debug)]
pub struct ComplexVar<'t> {
    pub re: Var<'t>,
    pub im: Var<'t>,
}

impl<'t> ComplexVar<'t> {
    pub fn value(&self) -> ComplexGrid {
        ComplexGrid { re: (*self.re.value()).clone(), im: (*self.im.value()).clone() }
    }

    /// Σ |self − other|² over all bins.
    pub fn squared_distance(&self, other: &ComplexVar<'t>) -> Result<Var<'t>> {
        let dr = self.re.sub(&other.re)?.square()?.sum()?;
        let di = self.im.sub(&other.im)?.square()?.sum()?;
        dr.add(&di)
    }
}

/// `(cos, sin)` DFT matrices of size `n x n`, entries at angle 2π·kj/n.
pub fn dft_matrices(n: usize) -> (Tensor, Tensor) {
    let mut c = Tensor::zeros([n, n]);
    let mut s = Tensor::zeros([n, n]);
    for k in 0..n {
        for j in 0..n {
            let ang = 2.0 * PI * ((k * j) % n) as f64 / n as f64;
            c.data_mut()[k * n + j] = ang.cos();
            s.data_mut()[k * n + j] = ang.sin();
        }
    }
    (c, s)
}

fn identity(n: usize) -> Tensor {
    Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

fn trailing(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return dim_err(op, format!("need at least 2 axes, got {shape:?}"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h == 0 || w == 0 {
        return dim_err(op, format!("empty spatial extent in {shape:?}"));
    }
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// `A · x_s · Bᵀ` for every trailing `[H, W]` slice `x_s`.
fn separable_apply(x: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (slices, h, w) = trailing(x.shape(), "separable")?;
    let (ho, wo) = (a.shape()[0], b.shape()[0]);
    if a.shape()[1] != h || b.shape()[1] != w {
        return dim_err(
            "separable",
            format!("maps {:?}/{:?} for slice {h}x{w}", a.shape(), b.shape()),
        );
    }
    let mut out = vec![0.0; slices * ho * wo];
    let mut tmp = vec![0.0; h * wo];
    for s in 0..slices {
        // tmp = x_s Bᵀ
        gemm(
            h, w, wo, 1.0, &x.data()[s * h * w..], w as isize, 1, b.data(), 1, w as isize, 0.0, &mut tmp,
            wo as isize, 1,
        );
        gemm(
            ho, h, wo, 1.0, a.data(), h as isize, 1, &tmp, wo as isize, 1, 0.0, &mut out[s * ho * wo..],
            wo as isize, 1,
        );
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(shape, out)
}

fn transpose(t: &Tensor) -> Tensor {
    t.permute(&[1, 0]).expect("2-D map")
}

/// Plain 2-D DFT over the trailing axes.
pub fn dft2(x: &Tensor) -> Result<ComplexGrid> {
    let (_, h, w) = trailing(x.shape(), "dft2")?;
    let (ch, sh) = dft_matrices(h);
    let (cw, sw) = dft_matrices(w);
    let re = separable_apply(x, &ch, &cw)?.sub(&separable_apply(x, &sh, &sw)?)?;
    let im = separable_apply(x, &sh, &cw)?
        .add(&separable_apply(x, &ch, &sw)?)?
        .scale(-1.0);
    Ok(ComplexGrid { re, im })
}

/// Inverse of [`dft2`]; returns the complex result (imaginary part ≈ 0 for real signals).
pub fn idft2(spec: &ComplexGrid) -> Result<ComplexGrid> {
    let (_, h, w) = trailing(spec.re.shape(), "idft2")?;
    let (ch, sh) = dft_matrices(h);
    let (cw, sw) = dft_matrices(w);
    let (ih, iw) = (identity(h), identity(w));
    let (xr, xi) = (&spec.re, &spec.im);
    // P = X · (C_W + i S_W)
    let pr = separable_apply(xr, &ih, &cw)?.sub(&separable_apply(xi, &ih, &sw)?)?;
    let pi = separable_apply(xr, &ih, &sw)?.add(&separable_apply(xi, &ih, &cw)?)?;
    // Q = (C_H + i S_H) · P
    let qr = separable_apply(&pr, &ch, &iw)?.sub(&separable_apply(&pi, &sh, &iw)?)?;
    let qi = separable_apply(&pr, &sh, &iw)?.add(&separable_apply(&pi, &ch, &iw)?)?;
    let norm = 1.0 / (h * w) as f64;
    Ok(ComplexGrid { re: qr.scale(norm), im: qi.scale(norm) })
}

/// Periodic Hann taper of length `n`; at hop `n/2` shifted copies sum to 1.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Outer product of two 1-D Hann tapers, `[n, n]`.
pub fn hann2d(n: usize) -> Tensor {
    let h = hann(n);
    Tensor::from_fn([n, n], |i| h[i / n] * h[i % n])
}

/// Top-left corners of the sliding windows over an `h x w` grid.
pub fn window_origins(h: usize, w: usize, window: usize, hop: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || hop == 0 {
        return dim_err("stft2", "window and hop must be >= 1");
    }
    if window > h || window > w {
        return dim_err("stft2", format!("window {window} exceeds grid {h}x{w}"));
    }
    let rows = (h - window) / hop + 1;
    let cols = (w - window) / hop + 1;
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * hop, c * hop)))
        .collect())
}

impl<'t> Var<'t> {
    /// `A · x_s · Bᵀ` for every trailing slice, with constant maps `A`, `B`.
    pub fn separable(&self, a: &Tensor, b: &Tensor) -> Result<Var<'t>> {
        let value = separable_apply(&self.value(), a, b)?;
        let (ho, hi, wo) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let slices = self.numel() / (hi * b.shape()[1]).max(1);
        self.tape.count_macs(slices * (hi * b.shape()[1] * wo + ho * hi * wo));
        let (at, bt) = (transpose(a), transpose(b));
        self.tape.push_op(
            "separable",
            value,
            &[*self],
            Box::new(move |g, _| Ok(vec![Some(separable_apply(g, &at, &bt)?)])),
        )
    }

    /// Differentiable 2-D DFT over the trailing axes.
    pub fn dft2(&self) -> Result<ComplexVar<'t>> {
        let shape = self.shape();
        let (_, h, w) = trailing(&shape, "dft2")?;
        let (ch, sh) = dft_matrices(h);
        let (cw, sw) = dft_matrices(w);
        let re = self.separable(&ch, &cw)?.sub(&self.separable(&sh, &sw)?)?;
        let im = self
            .separable(&sh, &cw)?
            .add(&self.separable(&ch, &sw)?)?
            .neg()?;
        Ok(ComplexVar { re, im })
    }

    /// Hann-weighted DFT of every sliding `window x window` patch of the trailing axes.
    pub fn stft2(&self, window: usize, hop: usize) -> Result<Vec<((usize, usize), ComplexVar<'t>)>> {
        let shape = self.shape();
        let (_, h, w) = trailing(&shape, "stft2")?;
        let origins = window_origins(h, w, window, hop)?;
        let nd = shape.len();
        let taper = self.tape.constant(hann2d(window));
        origins
            .into_iter()
            .map(|(r, c)| {
                let patch = self.narrow(nd - 2, r, window)?.narrow(nd - 1, c, window)?;
                Ok(((r, c), patch.mul(&taper)?.dft2()?))
            })
            .collect()
    }
}
