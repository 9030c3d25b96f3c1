//! Plain (non-differentiable) image helpers: resampling, blur, warping and PGM output.
//!
//! Images are `[C, H, W]` tensors.

use std::fs;
use std::path::Path;

use moediff_tensor::{Tape, Tensor};

use crate::error::{MoeError, Result};

fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// `[out, inp]` bicubic (Keys, a = −0.5) interpolation matrix, half-pixel centres, edge clamped.
pub fn bicubic_matrix(out: usize, inp: usize) -> Tensor {
    let mut m = Tensor::zeros([out, inp]);
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = (i as f64 + 0.5) * scale - 0.5;
        let base = src.floor() as isize;
        for tap in base - 1..=base + 2 {
            let w = keys_cubic(src - tap as f64);
            let j = tap.clamp(0, inp as isize - 1) as usize;
            m.data_mut()[i * inp + j] += w;
        }
    }
    m
}

/// `[out, inp]` bilinear interpolation matrix, half-pixel centres, edge clamped.
pub fn bilinear_matrix(out: usize, inp: usize) -> Tensor {
    let mut m = Tensor::zeros([out, inp]);
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let f = src - lo as f64;
        m.data_mut()[i * inp + lo] += 1.0 - f;
        m.data_mut()[i * inp + hi] += f;
    }
    m
}

/// `[out, inp]` area-averaging matrix: each output cell averages the input it covers.
pub fn area_matrix(out: usize, inp: usize) -> Tensor {
    let mut m = Tensor::zeros([out, inp]);
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
        for j in lo.floor() as usize..(hi.ceil() as usize).min(inp) {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            m.data_mut()[i * inp + j] = overlap / scale;
        }
    }
    m
}

/// `A · x_c · Bᵀ` for every channel.
pub fn separable(x: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::inference();
    let v = tape.constant(x.clone()).separable(a, b)?.value();
    Ok((*v).clone())
}

fn hw(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [_, h, w] | [_, _, h, w] => Ok((h, w)),
        _ => Err(MoeError::Contract(format!("expected an image tensor, got {:?}", x.shape()))),
    }
}

pub fn resize_bicubic(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = hw(x)?;
    separable(x, &bicubic_matrix(oh, h), &bicubic_matrix(ow, w))
}

pub fn resize_area(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = hw(x)?;
    separable(x, &area_matrix(oh, h), &area_matrix(ow, w))
}

/// Normalized 1-D Gaussian taps of radius `⌈3σ⌉`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// `[n, n]` matrix applying `taps` with replicated borders.
fn blur_matrix(n: usize, taps: &[f64]) -> Tensor {
    let r = (taps.len() / 2) as isize;
    let mut m = Tensor::zeros([n, n]);
    for i in 0..n as isize {
        for (k, &t) in taps.iter().enumerate() {
            let j = (i + k as isize - r).clamp(0, n as isize - 1) as usize;
            m.data_mut()[i as usize * n + j] += t;
        }
    }
    m
}

pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let (h, w) = hw(x)?;
    let taps = gaussian_taps(sigma);
    separable(x, &blur_matrix(h, &taps), &blur_matrix(w, &taps))
}

/// Samples `x` at `p + d(p)` with bilinear interpolation and clamped borders.
/// `disp` is `[2, H, W]` holding (row, column) displacements in pixels.
pub fn warp(x: &Tensor, disp: &Tensor) -> Result<Tensor> {
    let (h, w) = hw(x)?;
    if disp.shape() != [2, h, w] {
        return Err(MoeError::Contract(format!("warp field {:?} for image {h}x{w}", disp.shape())));
    }
    let c = x.numel() / (h * w);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let (d, xs) = (disp.data(), x.data());
    for r in 0..h {
        for q in 0..w {
            let sy = (r as f64 + d[r * w + q]).clamp(0.0, (h - 1) as f64);
            let sx = (q as f64 + d[h * w + r * w + q]).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let p = &xs[ch * h * w..];
                let v = (1.0 - fy) * ((1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1])
                    + fy * ((1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
                out.data_mut()[ch * h * w + r * w + q] = v;
            }
        }
    }
    Ok(out)
}

/// Writes the first channel as an 8-bit binary PGM, clamping to `[0, 1]`.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = hw(img)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.data()[..h * w].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| MoeError::io(path, e))
}

/// Reads an 8-bit binary PGM into `[1, H, W]` scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| MoeError::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(MoeError::format(path, "incomplete PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(MoeError::format(path, "only 8-bit P5 PGM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| MoeError::format(path, "bad PGM size"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes.get(pos..pos + w * h).ok_or(MoeError::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len() as u64,
    })?;
    Ok(Tensor::new([1, h, w], px.iter().map(|&b| b as f64 / 255.0).collect())?)
}
