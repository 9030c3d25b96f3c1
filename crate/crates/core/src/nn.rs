//! Parameterized layers on top of the tensor engine.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are bound
//! to a tape through a [`Binder`] at forward time.

use moediff_tensor::{Binder, Conv2dOpts, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Uniform `±bound` initializer.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

/// Parameter factory writing into one store under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: impl Into<String>) -> Self {
        Self { store, rng, prefix: prefix.into() }
    }

    /// Child factory with `name.` appended to the prefix.
    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init { store: self.store, rng: self.rng, prefix: format!("{}{name}.", self.prefix) }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = uniform(self.rng, shape, bound);
        self.add(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOpts,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, opts: Conv2dOpts) -> Self {
        let mut p = init.sub(name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: p.uniform("weight", &[cout, cin, k, k], bound),
            bias: Some(p.uniform("bias", &[cout], bound)),
            opts,
        }
    }

    pub fn no_bias(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, opts: Conv2dOpts) -> Self {
        let mut p = init.sub(name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self { weight: p.uniform("weight", &[cout, cin, k, k], bound), bias: None, opts }
    }

    /// `k x k` stride-1 convolution that keeps the spatial size (odd `k`).
    pub fn same(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(init, name, cin, cout, k, Conv2dOpts::new(1, k / 2, 1))
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let b = self.bias.map(|b| bd.var(b));
        Ok(x.conv2d(&bd.var(self.weight), b.as_ref(), self.opts)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvT2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        let mut p = init.sub(name);
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        Self {
            weight: p.uniform("weight", &[cin, cout, k, k], bound),
            bias: p.uniform("bias", &[cout], bound),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv_transpose2d(&bd.var(self.weight), Some(&bd.var(self.bias)), self.stride, self.padding)?)
    }
}

/// Affine map over the last axis: `[..., in] -> [..., out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        let mut p = init.sub(name);
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: p.uniform("weight", &[inp, out], bound),
            bias: p.uniform("bias", &[out], bound),
            inp,
            out,
        }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let rows = x.numel() / self.inp;
        let y = x
            .reshape([rows, self.inp])?
            .matmul(&bd.var(self.weight))?
            .add(&bd.var(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-scalar input") = self.out;
        Ok(y.reshape(out_shape)?)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        let mut p = init.sub(name);
        Self { gain: p.add("gain", Tensor::ones([dim])), shift: p.add("shift", Tensor::zeros([dim])) }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(1e-5)?.mul(&bd.var(self.gain))?.add(&bd.var(self.shift))?)
    }
}

/// `x + conv(silu(conv(silu(x))))` with 3x3 same-size convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ResBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut p = init.sub(name);
        Self {
            first: Conv2d::same(&mut p, "conv1", channels, channels, 3),
            second: Conv2d::same(&mut p, "conv2", channels, channels, 3),
        }
    }

    pub fn dilated(init: &mut Init, name: &str, channels: usize, dilation: usize) -> Self {
        let mut p = init.sub(name);
        let opts = Conv2dOpts::new(1, dilation, dilation);
        Self {
            first: Conv2d::new(&mut p, "conv1", channels, channels, 3, opts),
            second: Conv2d::new(&mut p, "conv2", channels, channels, 3, opts),
        }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.first.forward(bd, x.silu()?)?;
        let h = self.second.forward(bd, h.silu()?)?;
        Ok(x.add(&h)?)
    }
}

/// Applies one fixed `k x k` kernel to every channel independently.
pub fn depthwise_fixed<'t>(x: Var<'t>, kernel: &Tensor, opts: Conv2dOpts) -> Result<Var<'t>> {
    let shape = x.shape();
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    let planes = x.numel() / (h * w);
    let k = kernel.shape()[0];
    let kv = x.tape().constant(kernel.reshape([1, 1, k, k])?);
    let y = x.reshape([planes, 1, h, w])?.conv2d(&kv, None, opts)?;
    let ys = y.shape();
    let mut out = shape;
    out[n - 2] = ys[2];
    out[n - 1] = ys[3];
    Ok(y.reshape(out)?)
}

/// Pads the two trailing axes by repeating edge values.
pub fn pad_replicate<'t>(x: Var<'t>, pad: usize) -> Result<Var<'t>> {
    let n = x.shape().len();
    let mut y = x;
    for axis in [n - 2, n - 1] {
        let len = y.shape()[axis];
        let first = y.narrow(axis, 0, 1)?;
        let last = y.narrow(axis, len - 1, 1)?;
        let mut parts = vec![first; pad];
        parts.push(y);
        parts.extend(std::iter::repeat_n(last, pad));
        y = Var::concat(&parts, axis)?;
    }
    Ok(y)
}

/// Mean over every axis but the first: `[B, ...] -> [B]`.
pub fn mean_per_example<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let b = x.shape()[0];
    Ok(x.reshape([b, x.numel() / b])?.mean_axis(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use moediff_tensor::Tape;
    use rand::SeedableRng;

    #[test]
    fn linear_keeps_leading_axes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut Init::new(&mut store, &mut rng, "m."), "proj", 4, 3);
        assert!(store.find("m.proj.weight").is_some());
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &store, false);
        let y = lin.forward(&bd, tape.constant(Tensor::ones([2, 5, 4]))).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 3]);
    }

    #[test]
    fn replicate_padding_of_constant_is_constant() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full([2, 1, 3, 4], 0.7));
        let y = pad_replicate(x, 2).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 7, 8]);
        assert!(y.value().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn replicate_padding_repeats_edges() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn([1, 2, 2], |i| i as f64));
        let y = pad_replicate(x, 1).unwrap().value();
        assert_eq!(y.at(&[0, 0, 0]), 0.0);
        assert_eq!(y.at(&[0, 3, 3]), 3.0);
        assert_eq!(y.at(&[0, 0, 3]), 1.0);
    }
}
