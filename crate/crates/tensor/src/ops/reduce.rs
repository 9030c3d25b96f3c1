use crate::error::{dim_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Cosine similarity of two flat vectors; 0 when either vector is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

/// Row-wise softmax over the last axis of a plain tensor.
pub fn softmax_last(t: &Tensor) -> Result<Tensor> {
    let n = *t.shape().last().unwrap_or(&0);
    if n == 0 {
        return dim_err("softmax", "empty softmax axis");
    }
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn sum(&self) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.tape.push_op(
            "sum",
            Tensor::scalar(xv.sum()),
            &[*self],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(shape.clone(), g.data()[0]))])),
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return dim_err("sum_axis", format!("axis {axis} for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for a in 0..dim {
                let src = &d[(o * dim + a) * inner..(o * dim + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.tape.push_op(
            "sum_axis",
            Tensor::new(out_shape, out)?,
            &[*self],
            Box::new(move |g, _| {
                let mut full = vec![0.0; outer * dim * inner];
                let gd = g.data();
                for o in 0..outer {
                    for a in 0..dim {
                        full[(o * dim + a) * inner..(o * dim + a + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                Ok(vec![Some(Tensor::new(shape.clone(), full)?)])
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let dim = *self.shape().get(axis).unwrap_or(&1) as f64;
        self.sum_axis(axis)?.scale(1.0 / dim)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let y = softmax_last(&self.value())?;
        let n = *y.shape().last().unwrap();
        let yv = y.clone();
        self.tape.push_op(
            "softmax",
            y,
            &[*self],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for (row_g, row_y) in dx.data_mut().chunks_mut(n).zip(yv.data().chunks(n)) {
                    let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                    for (gv, &yi) in row_g.iter_mut().zip(row_y) {
                        *gv = yi * (*gv - dot);
                    }
                }
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let n = *xv.shape().last().unwrap_or(&0);
        if n == 0 {
            return dim_err("layer_norm", "empty normalization axis");
        }
        let mut y = (*xv).clone();
        let mut inv_std = Vec::with_capacity(xv.numel() / n);
        for row in y.data_mut().chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let yv = y.clone();
        self.tape.push_op(
            "layer_norm",
            y,
            &[*self],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for ((row_g, row_y), &is) in dx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(yv.data().chunks(n))
                    .zip(&inv_std)
                {
                    let mg = row_g.iter().sum::<f64>() / n as f64;
                    let mgy = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (gv, &yi) in row_g.iter_mut().zip(row_y) {
                        *gv = is * (*gv - mg - yi * mgy);
                    }
                }
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// Pairwise cosine similarity between rows: `[n,d] x [m,d] -> [n,m]`.
    ///
    /// A pair involving a zero row scores 0 and passes no gradient.
    pub fn cosine_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
            return dim_err(
                "cosine_rows",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            );
        }
        let (n, m, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let norms = |t: &Tensor, rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|r| t.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let (na, nb) = (norms(&a, n), norms(&b, m));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                if na[i] == 0.0 || nb[j] == 0.0 {
                    continue;
                }
                let dot: f64 = a.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&b.data()[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
                out[i * m + j] = dot / (na[i] * nb[j]);
            }
        }
        let cos = Tensor::new([n, m], out)?;
        let cv = cos.clone();
        self.tape.push_op(
            "cosine_rows",
            cos,
            &[*self, *other],
            Box::new(move |g, needs| {
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if na[i] == 0.0 || nb[j] == 0.0 || gij == 0.0 {
                            continue;
                        }
                        let c = cv.data()[i * m + j];
                        let ai = &a.data()[i * d..(i + 1) * d];
                        let bj = &b.data()[j * d..(j + 1) * d];
                        let inv = 1.0 / (na[i] * nb[j]);
                        if needs[0] {
                            for k in 0..d {
                                ga[i * d + k] += gij * (bj[k] * inv - c * ai[k] / (na[i] * na[i]));
                            }
                        }
                        if needs[1] {
                            for k in 0..d {
                                gb[j * d + k] += gij * (ai[k] * inv - c * bj[k] / (nb[j] * nb[j]));
                            }
                        }
                    }
                }
                Ok(vec![
                    needs[0].then(|| Tensor::new([n, d], ga)).transpose()?,
                    needs[1].then(|| Tensor::new([m, d], gb)).transpose()?,
                ])
            }),
        )
    }

    /// Cosine similarity of two equally shaped tensors taken as flat vectors.
    pub fn cosine_similarity(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return dim_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            );
        }
        let n = self.numel();
        self.reshape([1, n])?
            .cosine_rows(&other.reshape([1, n])?)?
            .reshape(Vec::new())
    }

    /// Mean of squared differences.
    pub fn mse(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return dim_err("mse", format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        self.sub(other)?.square()?.mean()
    }
}
