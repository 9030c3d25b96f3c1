//! The three conditional noise predictors.
//!
//! All experts share the same input contract: the noisy latent, a spatial
//! conditioning map derived from the token sequence, a constant channel
//! holding the expert's gate weight, and the timestep (sinusoidal embedding
//! added at the bottleneck). They differ in their encoder, bottleneck and
//! decoder blocks:
//!
//! * [`ExpertKind::Edge`]: residual U-Net with a fixed-Laplacian edge
//!   enhancement block and a dilated bottleneck.
//! * [`ExpertKind::Dense`]: dense blocks (growth 16) and a complex-valued
//!   bottleneck convolution over (real, imaginary) feature halves.
//! * [`ExpertKind::Attention`]: channel attention after every stage and a
//!   non-local self-attention block at full latent resolution.

use moediff_tensor::{Binder, Conv2dOpts, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::imaging::bilinear_matrix;
use crate::nn::{depthwise_fixed, Conv2d, ConvT2d, Init, Linear, ResBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertKind {
    Edge,
    Dense,
    Attention,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Edge, ExpertKind::Dense, ExpertKind::Attention];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Channels of the feature map fed in from the condition encoder.
    pub cond_features: usize,
    /// Side of the conditioning grid.
    pub cond_grid: usize,
    pub base_channels: usize,
    pub time_dim: usize,
}

const GROWTH: usize = 16;
const DENSE_LAYERS: usize = 4;

fn down() -> Conv2dOpts {
    Conv2dOpts::new(2, 1, 1)
}

/// Sinusoidal embedding `[B, dim]` of integer timesteps.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn([t.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let freq = (-(10000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let arg = t[b] as f64 * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

struct EdgeBlock {
    mix: Conv2d,
}

impl EdgeBlock {
    fn laplacian() -> Tensor {
        Tensor::new([3, 3], vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).expect("3x3")
    }

    fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let lap = depthwise_fixed(x, &Self::laplacian(), Conv2dOpts::new(1, 1, 1))?;
        Ok(x.add(&self.mix.forward(bd, lap)?)?)
    }
}

struct DenseBlock {
    layers: Vec<Conv2d>,
    transition: Conv2d,
}

impl DenseBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let mut p = init.sub(name);
        let layers = (0..DENSE_LAYERS)
            .map(|i| Conv2d::same(&mut p, &format!("layer{i}"), cin + i * GROWTH, GROWTH, 3))
            .collect();
        let transition = Conv2d::same(&mut p, "transition", cin + DENSE_LAYERS * GROWTH, cout, 1);
        Self { layers, transition }
    }

    fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut feats = x;
        for layer in &self.layers {
            let new = layer.forward(bd, feats.silu()?)?;
            feats = Var::concat(&[feats, new], 1)?;
        }
        self.transition.forward(bd, feats.silu()?)
    }
}

/// Complex convolution over the (real, imaginary) halves of the channels.
struct ComplexConv {
    real: Conv2d,
    imag: Conv2d,
}

impl ComplexConv {
    fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let c = x.shape()[1] / 2;
        let (re, im) = (x.narrow(1, 0, c)?, x.narrow(1, c, c)?);
        let out_re = self.real.forward(bd, re)?.sub(&self.imag.forward(bd, im)?)?;
        let out_im = self.real.forward(bd, im)?.add(&self.imag.forward(bd, re)?)?;
        Ok(Var::concat(&[out_re, out_im], 1)?)
    }
}

struct ChannelAttention {
    squeeze: Linear,
    excite: Linear,
}

impl ChannelAttention {
    fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut p = init.sub(name);
        Self {
            squeeze: Linear::new(&mut p, "squeeze", channels, (channels / 4).max(1)),
            excite: Linear::new(&mut p, "excite", (channels / 4).max(1), channels),
        }
    }

    fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, c) = (s[0], s[1]);
        let pooled = x.reshape([b, c, s[2] * s[3]])?.mean_axis(2)?;
        let w = self.excite.forward(bd, self.squeeze.forward(bd, pooled)?.silu()?)?.sigmoid()?;
        Ok(x.mul(&w.reshape([b, c, 1, 1])?)?)
    }
}

/// Embedded-Gaussian non-local block: `x + W_z · softmax(θᵀφ)·g`.
pub struct NonLocal {
    theta: Conv2d,
    phi: Conv2d,
    pub value: Conv2d,
    out: Conv2d,
}

impl NonLocal {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut p = init.sub(name);
        let inner = (channels / 2).max(1);
        let o = Conv2dOpts::default();
        Self {
            theta: Conv2d::no_bias(&mut p, "theta", channels, inner, 1, o),
            phi: Conv2d::no_bias(&mut p, "phi", channels, inner, 1, o),
            value: Conv2d::no_bias(&mut p, "value", channels, inner, 1, o),
            out: Conv2d::no_bias(&mut p, "out", inner, channels, 1, o),
        }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, hw) = (s[0], s[2] * s[3]);
        let flat = |v: Var<'t>| -> Result<Var<'t>> {
            let c = v.shape()[1];
            Ok(v.reshape([b, c, hw])?)
        };
        let theta = flat(self.theta.forward(bd, x)?)?;
        let inner = theta.shape()[1];
        let phi = flat(self.phi.forward(bd, x)?)?;
        let g = flat(self.value.forward(bd, x)?)?;
        let attn = theta
            .permute(&[0, 2, 1])?
            .matmul(&phi)?
            .scale(1.0 / (inner as f64).sqrt())?
            .softmax()?;
        let y = attn.matmul(&g.permute(&[0, 2, 1])?)?.permute(&[0, 2, 1])?.reshape([b, inner, s[2], s[3]])?;
        Ok(x.add(&self.out.forward(bd, y)?)?)
    }
}

enum Body {
    Edge {
        stem: Conv2d,
        res0: ResBlock,
        edge: EdgeBlock,
        down1: Conv2d,
        res1: ResBlock,
        down2: Conv2d,
        res2: ResBlock,
        dilated: Conv2d,
        mid: ResBlock,
        up1: ConvT2d,
        res3: ResBlock,
        up2: ConvT2d,
        res4: ResBlock,
    },
    Dense {
        stem: Conv2d,
        down1: Conv2d,
        dense1: DenseBlock,
        down2: Conv2d,
        dense2: DenseBlock,
        complex: ComplexConv,
        up1: ConvT2d,
        dense3: DenseBlock,
        up2: ConvT2d,
        dense4: DenseBlock,
    },
    Attention {
        stem: Conv2d,
        down1: Conv2d,
        conv1: Conv2d,
        ca1: ChannelAttention,
        down2: Conv2d,
        conv2: Conv2d,
        ca2: ChannelAttention,
        mid_conv: Conv2d,
        mid: ResBlock,
        up1: ConvT2d,
        ca3: ChannelAttention,
        up2: ConvT2d,
        ca4: ChannelAttention,
        nonlocal: NonLocal,
    },
}

pub struct Expert {
    pub kind: ExpertKind,
    pub config: ExpertConfig,
    /// Parameter-name prefix, e.g. `expert2.`.
    pub prefix: String,
    cond_proj: Linear,
    time1: Linear,
    time2: Linear,
    body: Body,
    head: Conv2d,
}

impl Expert {
    pub fn new(init: &mut Init, index: usize, kind: ExpertKind, config: ExpertConfig) -> Self {
        let name = format!("expert{}", index + 1);
        let mut p = init.sub(&name);
        let (c, c2) = (config.base_channels, 2 * config.base_channels);
        let cin = 2 * config.latent_channels + 1;
        let cond_proj = Linear::new(&mut p, "cond_proj", config.cond_features, config.latent_channels);
        let time1 = Linear::new(&mut p, "time1", config.time_dim, c2);
        let time2 = Linear::new(&mut p, "time2", c2, c2);
        let body = match kind {
            ExpertKind::Edge => Body::Edge {
                stem: Conv2d::same(&mut p, "stem", cin, c, 3),
                res0: ResBlock::new(&mut p, "res0", c),
                edge: EdgeBlock { mix: Conv2d::same(&mut p, "edge_mix", c, c, 1) },
                down1: Conv2d::new(&mut p, "down1", c, c2, 4, down()),
                res1: ResBlock::new(&mut p, "res1", c2),
                down2: Conv2d::new(&mut p, "down2", c2, c2, 4, down()),
                res2: ResBlock::new(&mut p, "res2", c2),
                dilated: Conv2d::new(&mut p, "dilated", c2, c2, 3, Conv2dOpts::new(1, 2, 2)),
                mid: ResBlock::new(&mut p, "mid", c2),
                up1: ConvT2d::new(&mut p, "up1", c2, c2, 4, 2, 1),
                res3: ResBlock::new(&mut p, "res3", c2),
                up2: ConvT2d::new(&mut p, "up2", c2, c, 4, 2, 1),
                res4: ResBlock::new(&mut p, "res4", c),
            },
            ExpertKind::Dense => Body::Dense {
                stem: Conv2d::same(&mut p, "stem", cin, c, 3),
                down1: Conv2d::new(&mut p, "down1", c, c, 4, down()),
                dense1: DenseBlock::new(&mut p, "dense1", c, c2),
                down2: Conv2d::new(&mut p, "down2", c2, c2, 4, down()),
                dense2: DenseBlock::new(&mut p, "dense2", c2, c2),
                complex: {
                    let mut q = p.sub("complex");
                    ComplexConv {
                        real: Conv2d::same(&mut q, "real", c2 / 2, c2 / 2, 3),
                        imag: Conv2d::same(&mut q, "imag", c2 / 2, c2 / 2, 3),
                    }
                },
                up1: ConvT2d::new(&mut p, "up1", c2, c2, 4, 2, 1),
                dense3: DenseBlock::new(&mut p, "dense3", c2, c2),
                up2: ConvT2d::new(&mut p, "up2", c2, c, 4, 2, 1),
                dense4: DenseBlock::new(&mut p, "dense4", c, c),
            },
            ExpertKind::Attention => Body::Attention {
                stem: Conv2d::same(&mut p, "stem", cin, c, 3),
                down1: Conv2d::new(&mut p, "down1", c, c2, 4, down()),
                conv1: Conv2d::same(&mut p, "conv1", c2, c2, 3),
                ca1: ChannelAttention::new(&mut p, "ca1", c2),
                down2: Conv2d::new(&mut p, "down2", c2, c2, 4, down()),
                conv2: Conv2d::same(&mut p, "conv2", c2, c2, 3),
                ca2: ChannelAttention::new(&mut p, "ca2", c2),
                mid_conv: Conv2d::same(&mut p, "mid_conv", c2, c2, 3),
                mid: ResBlock::new(&mut p, "mid", c2),
                up1: ConvT2d::new(&mut p, "up1", c2, c2, 4, 2, 1),
                ca3: ChannelAttention::new(&mut p, "ca3", c2),
                up2: ConvT2d::new(&mut p, "up2", c2, c, 4, 2, 1),
                ca4: ChannelAttention::new(&mut p, "ca4", c),
                nonlocal: NonLocal::new(&mut p, "nonlocal", c),
            },
        };
        let head = Conv2d::same(&mut p, "head", c, config.latent_channels, 1);
        Self { kind, config, prefix: format!("{name}."), cond_proj, time1, time2, body, head }
    }

    /// The non-local block of an attention expert.
    pub fn nonlocal(&self) -> Option<&NonLocal> {
        match &self.body {
            Body::Attention { nonlocal, .. } => Some(nonlocal),
            _ => None,
        }
    }

    /// Conditioning grid `[B, G, G, F]` → latent-sized map `[B, C, h, w]`.
    pub fn condition_map<'t>(&self, bd: &Binder<'t, '_>, cond_grid: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        let m = self.cond_proj.forward(bd, cond_grid)?.permute(&[0, 3, 1, 2])?;
        if cfg.cond_grid == cfg.latent_size {
            return Ok(m);
        }
        let r = bilinear_matrix(cfg.latent_size, cfg.cond_grid);
        Ok(m.separable(&r, &r)?)
    }

    /// Predicted noise `[B, C, h, w]`.
    pub fn predict_eps<'t>(
        &self,
        bd: &Binder<'t, '_>,
        z_t: Var<'t>,
        cond_grid: Var<'t>,
        t: &[usize],
        gate: &[f64],
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let zs = z_t.shape();
        let b = zs[0];
        if zs.len() != 4 || zs[1] != cfg.latent_channels || zs[2] != cfg.latent_size || zs[3] != cfg.latent_size {
            return Err(moediff_tensor::TensorError::Dimension {
                op: "predict_eps",
                detail: format!(
                    "latent {zs:?}, expected [B,{},{},{}]",
                    cfg.latent_channels, cfg.latent_size, cfg.latent_size
                ),
            }
            .into());
        }
        if t.len() != b || gate.len() != b {
            return Err(MoeError::Contract(format!("{} timesteps / {} gates for batch {b}", t.len(), gate.len())));
        }
        let tape = bd.tape();
        let hw = cfg.latent_size * cfg.latent_size;
        let gate_map = Tensor::from_fn([b, 1, cfg.latent_size, cfg.latent_size], |i| gate[i / hw]);
        let x = Var::concat(&[z_t, self.condition_map(bd, cond_grid)?, tape.constant(gate_map)], 1)?;
        let temb = tape.constant(timestep_embedding(t, cfg.time_dim));
        let temb = self.time2.forward(bd, self.time1.forward(bd, temb)?.silu()?)?;
        let temb = temb.reshape([b, 2 * cfg.base_channels, 1, 1])?;
        let h = match &self.body {
            Body::Edge { stem, res0, edge, down1, res1, down2, res2, dilated, mid, up1, res3, up2, res4 } => {
                let s0 = edge.forward(bd, res0.forward(bd, stem.forward(bd, x)?)?)?;
                let s1 = res1.forward(bd, down1.forward(bd, s0)?)?;
                let h = res2.forward(bd, down2.forward(bd, s1)?)?;
                let h = dilated.forward(bd, h.silu()?)?.add(&temb)?;
                let h = mid.forward(bd, h)?;
                let h = res3.forward(bd, up1.forward(bd, h.silu()?)?.add(&s1)?)?;
                res4.forward(bd, up2.forward(bd, h.silu()?)?.add(&s0)?)?
            }
            Body::Dense { stem, down1, dense1, down2, dense2, complex, up1, dense3, up2, dense4 } => {
                let s0 = stem.forward(bd, x)?;
                let s1 = dense1.forward(bd, down1.forward(bd, s0.silu()?)?)?;
                let h = dense2.forward(bd, down2.forward(bd, s1.silu()?)?)?;
                let h = h.add(&complex.forward(bd, h.silu()?)?)?.add(&temb)?;
                let h = dense3.forward(bd, up1.forward(bd, h.silu()?)?.add(&s1)?)?;
                dense4.forward(bd, up2.forward(bd, h.silu()?)?.add(&s0)?)?
            }
            Body::Attention {
                stem,
                down1,
                conv1,
                ca1,
                down2,
                conv2,
                ca2,
                mid_conv,
                mid,
                up1,
                ca3,
                up2,
                ca4,
                nonlocal,
            } => {
                let s0 = stem.forward(bd, x)?;
                let h = down1.forward(bd, s0.silu()?)?;
                let s1 = ca1.forward(bd, conv1.forward(bd, h.silu()?)?.add(&h)?)?;
                let h = down2.forward(bd, s1.silu()?)?;
                let h = ca2.forward(bd, conv2.forward(bd, h.silu()?)?.add(&h)?)?;
                let h = mid.forward(bd, mid_conv.forward(bd, h.silu()?)?.add(&temb)?)?;
                let h = ca3.forward(bd, up1.forward(bd, h.silu()?)?.add(&s1)?)?;
                let h = ca4.forward(bd, up2.forward(bd, h.silu()?)?.add(&s0)?)?;
                nonlocal.forward(bd, h)?
            }
        };
        self.head.forward(bd, h.silu()?)
    }
}
