//! 2-D convolution and transposed convolution lowered to GEMM via im2col.
//!
//! Inputs are `[B, C, H, W]`; a `[C, H, W]` input is treated as `B = 1` and the
//! output drops the batch axis again. Columns are rebuilt in the backward pass
//! instead of being kept alive on the tape.

use crate::error::{dim_err, Result};
use crate::linalg::{gemm, ConvGeom};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Output extent along one spatial axis.
    pub fn out_size(&self, size: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        (size + 2 * self.padding >= span).then(|| (size + 2 * self.padding - span) / self.stride + 1)
    }
}

fn split_batch(shape: &[usize], op: &'static str) -> Result<(bool, usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((false, 1, c, h, w)),
        [b, c, h, w] => Ok((true, b, c, h, w)),
        _ => dim_err(op, format!("expected [C,H,W] or [B,C,H,W], got {shape:?}")),
    }
}

fn check_bias(bias: &Option<Var<'_>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return dim_err(op, format!("bias {:?} for {channels} output channels", b.shape()));
        }
    }
    Ok(())
}

fn bias_grad(g: &Tensor, batch: usize, channels: usize) -> Tensor {
    let plane = g.numel() / (batch * channels);
    let mut db = vec![0.0; channels];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::new([channels], db).expect("bias grad")
}

impl<'t> Var<'t> {
    /// Cross-correlation with `weight` of shape `[C_out, C_in, k, k]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, opts: Conv2dOpts) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (batched, bs, c, h, wd) = split_batch(x.shape(), "conv2d")?;
        let &[co, ci, k, k2] = w.shape() else {
            return dim_err("conv2d", format!("kernel must be 4-D, got {:?}", w.shape()));
        };
        if ci != c || k != k2 || k == 0 {
            return dim_err(
                "conv2d",
                format!("kernel {:?} does not fit input {:?}", w.shape(), x.shape()),
            );
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return dim_err("conv2d", "stride and dilation must be >= 1");
        }
        let bias = bias.copied();
        check_bias(&bias, co, "conv2d")?;
        let Some(geom) = ConvGeom::new(c, h, wd, k, opts.stride, opts.padding, opts.dilation) else {
            return dim_err(
                "conv2d",
                format!("padded input {h}x{wd} smaller than dilated kernel {k} (dilation {})", opts.dilation),
            );
        };
        let (rows, npos) = (geom.rows(), geom.cols());
        let in_plane = c * h * wd;
        self.tape.count_macs(bs * co * rows * npos);
        let mut out = vec![0.0; bs * co * npos];
        let mut cols = vec![0.0; rows * npos];
        for b in 0..bs {
            geom.im2col(&x.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
            gemm(
                co, rows, npos, 1.0, w.data(), rows as isize, 1, &cols, npos as isize, 1, 0.0,
                &mut out[b * co * npos..], npos as isize, 1,
            );
        }
        if let Some(bv) = &bias {
            let bv = bv.value();
            for (i, chunk) in out.chunks_mut(npos).enumerate() {
                let v = bv.data()[i % co];
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
        let shape = if batched {
            vec![bs, co, geom.oh, geom.ow]
        } else {
            vec![co, geom.oh, geom.ow]
        };
        let mut parents = vec![*self, *weight];
        parents.extend(bias);
        self.tape.push_op(
            "conv2d",
            Tensor::new(shape, out)?,
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
                let mut cols = vec![0.0; rows * npos];
                let mut dcols = vec![0.0; rows * npos];
                for b in 0..bs {
                    let gb = &gd[b * co * npos..(b + 1) * co * npos];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&x.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
                        // dW += G_b cols^T
                        gemm(
                            co, npos, rows, 1.0, gb, npos as isize, 1, &cols, 1, npos as isize, 1.0, dw,
                            rows as isize, 1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols = W^T G_b
                        gemm(
                            rows, co, npos, 1.0, w.data(), 1, rows as isize, gb, npos as isize, 1, 0.0,
                            &mut dcols, npos as isize, 1,
                        );
                        geom.col2im(&dcols, &mut dx[b * in_plane..(b + 1) * in_plane]);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
                ];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| bias_grad(g, bs, co)));
                }
                Ok(res)
            }),
        )
    }

    /// Transposed convolution with `weight` of shape `[C_in, C_out, k, k]`.
    ///
    /// Output extent is `(H - 1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (batched, bs, ci, h, wd) = split_batch(x.shape(), "conv_transpose2d")?;
        let &[wci, co, k, k2] = w.shape() else {
            return dim_err("conv_transpose2d", format!("kernel must be 4-D, got {:?}", w.shape()));
        };
        if wci != ci || k != k2 || stride == 0 {
            return dim_err(
                "conv_transpose2d",
                format!("kernel {:?} does not fit input {:?}", w.shape(), x.shape()),
            );
        }
        let bias = bias.copied();
        check_bias(&bias, co, "conv_transpose2d")?;
        if (h - 1) * stride + k < 2 * padding + 1 || (wd - 1) * stride + k < 2 * padding + 1 {
            return dim_err("conv_transpose2d", "padding removes the whole output");
        }
        let oh = (h - 1) * stride + k - 2 * padding;
        let ow = (wd - 1) * stride + k - 2 * padding;
        // geometry of the forward conv that maps the output grid back onto the input grid
        let geom = ConvGeom::new(co, oh, ow, k, stride, padding, 1)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or(crate::TensorError::Dimension {
                op: "conv_transpose2d",
                detail: "inconsistent transposed geometry".into(),
            })?;
        let (rows, npos) = (geom.rows(), h * wd);
        let (in_plane, out_plane) = (ci * npos, co * oh * ow);
        self.tape.count_macs(bs * ci * rows * npos);
        let mut out = vec![0.0; bs * out_plane];
        let mut cols = vec![0.0; rows * npos];
        for b in 0..bs {
            // cols = W^T x_b
            gemm(
                rows, ci, npos, 1.0, w.data(), 1, rows as isize, &x.data()[b * in_plane..], npos as isize,
                1, 0.0, &mut cols, npos as isize, 1,
            );
            geom.col2im(&cols, &mut out[b * out_plane..(b + 1) * out_plane]);
        }
        if let Some(bv) = &bias {
            let bv = bv.value();
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let v = bv.data()[i % co];
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
        let shape = if batched { vec![bs, co, oh, ow] } else { vec![co, oh, ow] };
        let mut parents = vec![*self, *weight];
        parents.extend(bias);
        self.tape.push_op(
            "conv_transpose2d",
            Tensor::new(shape, out)?,
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
                let mut gcols = vec![0.0; rows * npos];
                for b in 0..bs {
                    geom.im2col(&gd[b * out_plane..(b + 1) * out_plane], &mut gcols);
                    if let Some(dx) = dx.as_mut() {
                        // dx_b = W gcols
                        gemm(
                            ci, rows, npos, 1.0, w.data(), rows as isize, 1, &gcols, npos as isize, 1,
                            0.0, &mut dx[b * in_plane..], npos as isize, 1,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        // dW += x_b gcols^T
                        gemm(
                            ci, npos, rows, 1.0, &x.data()[b * in_plane..], npos as isize, 1, &gcols, 1,
                            npos as isize, 1.0, dw, rows as isize, 1,
                        );
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
                ];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| bias_grad(g, bs, co)));
                }
                Ok(res)
            }),
        )
    }
}
