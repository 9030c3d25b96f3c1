//! GEMM wrapper and the im2col/col2im lowering used by the convolutions.

/// `c = alpha * a * b + beta * c` for strided row/column-major views.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: a too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: b too short");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: c too short");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let p = &mut c[(i as isize * rsc + j as isize * csc) as usize];
                *p *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Geometry of a 2-D convolution over a single `[c, h, w]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<Self> {
        let span = dil * (k - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            return None;
        }
        let oh = (h + 2 * pad - span) / stride + 1;
        let ow = (w + 2 * pad - span) / stride + 1;
        Some(Self { c, h, w, k, stride, pad, dil, oh, ow })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Lowers `img` (`[c,h,w]`) into `cols` (`[c*k*k, oh*ow]`).
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.oh, self.ow);
        let npos = oh * ow;
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (c * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    let dy = (kh * self.dil) as isize - self.pad as isize;
                    let dx = (kw * self.dil) as isize - self.pad as isize;
                    for y in 0..oh {
                        let iy = (y * self.stride) as isize + dy;
                        let out_row = &mut dst[y * ow..(y + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (x, o) in out_row.iter_mut().enumerate() {
                            let ix = (x * self.stride) as isize + dx;
                            *o = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds `cols` back into `img`.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.oh, self.ow);
        let npos = oh * ow;
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (c * self.k + kh) * self.k + kw;
                    let src = &cols[row * npos..(row + 1) * npos];
                    let dy = (kh * self.dil) as isize - self.pad as isize;
                    let dx = (kw * self.dil) as isize - self.pad as isize;
                    for y in 0..oh {
                        let iy = (y * self.stride) as isize + dy;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (x, &v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                            let ix = (x * self.stride) as isize + dx;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
