//! Multi-scale patch tokens of the low-resolution input and a windowed-attention encoder.

use moediff_tensor::{Binder, Conv2dOpts, ParamId, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::nn::{Conv2d, Init, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Side of the (upsampled) conditioning image.
    pub input_size: usize,
    /// Patch sides, strictly decreasing.
    pub scales: Vec<usize>,
    pub embed_dim: usize,
    pub window: usize,
    pub heads: usize,
    pub layers: usize,
}

impl PatchConfig {
    pub fn desk() -> Self {
        Self { input_size: 64, scales: vec![16, 8, 4], embed_dim: 64, window: 16, heads: 4, layers: 2 }
    }

    pub fn paper() -> Self {
        Self { input_size: 256, scales: vec![64, 32, 16], embed_dim: 256, window: 16, heads: 8, layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(MoeError::Config(format!("patch scales must be strictly decreasing: {:?}", self.scales)));
        }
        if let Some(p) = self.scales.iter().find(|&&p| p == 0 || self.input_size % p != 0) {
            return Err(TensorError::Dimension {
                op: "patchify",
                detail: format!("input {} not divisible by patch {p}", self.input_size),
            }
            .into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 || self.window == 0 {
            return Err(MoeError::Config("embed_dim must be divisible by heads; window >= 1".into()));
        }
        Ok(())
    }

    /// Tokens contributed by each scale.
    pub fn counts(&self) -> Vec<usize> {
        self.scales.iter().map(|p| (self.input_size / p).pow(2)).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.counts().iter().sum()
    }

    /// `(patch, start, len)` row ranges of each scale in the concatenated sequence.
    pub fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut start = 0;
        self.scales
            .iter()
            .zip(self.counts())
            .map(|(&p, n)| {
                let r = (p, start, n);
                start += n;
                r
            })
            .collect()
    }

    /// Side of the finest patch grid.
    pub fn finest_grid(&self) -> usize {
        self.input_size / self.scales.last().copied().unwrap_or(1)
    }
}

/// Encoded tokens `[B, N, d]` with the per-scale row ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub offsets: Vec<(usize, usize, usize)>,
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct ConditionEncoder {
    pub config: PatchConfig,
    embed: Vec<Conv2d>,
    pub positions: ParamId,
    blocks: Vec<Block>,
}

/// Additive mask hiding padded keys from attention.
const MASKED: f64 = -1e9;

impl ConditionEncoder {
    pub fn new(init: &mut Init, config: PatchConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut p = init.sub("cond");
        let embed = config
            .scales
            .iter()
            .enumerate()
            .map(|(i, &s)| Conv2d::new(&mut p, &format!("patch{i}"), 1, d, s, Conv2dOpts::new(s, 0, 1)))
            .collect();
        let positions = p.uniform("positions", &[config.num_tokens(), d], 0.02);
        let blocks = (0..config.layers)
            .map(|l| {
                let mut b = p.sub(&format!("block{l}"));
                Block {
                    norm1: LayerNorm::new(&mut b, "norm1", d),
                    qkv: Linear::new(&mut b, "qkv", d, 3 * d),
                    proj: Linear::new(&mut b, "proj", d, d),
                    norm2: LayerNorm::new(&mut b, "norm2", d),
                    fc1: Linear::new(&mut b, "fc1", d, 2 * d),
                    fc2: Linear::new(&mut b, "fc2", 2 * d, d),
                }
            })
            .collect();
        Ok(Self { config, embed, positions, blocks })
    }

    /// Output projection of every attention block, for residual-path tests.
    pub fn attention_projections(&self) -> Vec<(ParamId, ParamId)> {
        self.blocks.iter().map(|b| (b.proj.weight, b.proj.bias)).collect()
    }

    /// `[B, 1, S, S]` → one `[B, (S/p)², d]` token matrix per scale, row-major over the patch grid.
    pub fn patchify<'t>(&self, bd: &Binder<'t, '_>, y: Var<'t>) -> Result<Vec<Var<'t>>> {
        let shape = y.shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(TensorError::Dimension {
                op: "patchify",
                detail: format!("expected [B,1,{s},{s}], got {shape:?}"),
            }
            .into());
        }
        let b = shape[0];
        let d = self.config.embed_dim;
        self.embed
            .iter()
            .zip(self.config.counts())
            .map(|(conv, n)| Ok(conv.forward(bd, y)?.reshape([b, d, n])?.permute(&[0, 2, 1])?))
            .collect()
    }

    /// Windowed pre-norm transformer over `[B, N, d]`.
    pub fn encode_tokens<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.blocks.iter().try_fold(x, |x, blk| self.block(bd, blk, x))
    }

    /// Patch tokens plus position embeddings, then the encoder: `[B,1,S,S] -> [B,N,d]`.
    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, y: Var<'t>) -> Result<Var<'t>> {
        let tokens = Var::concat(&self.patchify(bd, y)?, 1)?;
        let x = tokens.add(&bd.var(self.positions))?;
        self.encode_tokens(bd, x)
    }

    fn block<'t>(&self, bd: &Binder<'t, '_>, blk: &Block, x: Var<'t>) -> Result<Var<'t>> {
        let h = blk.norm1.forward(bd, x)?;
        let x = x.add(&self.window_attention(bd, blk, h)?)?;
        let h = blk.norm2.forward(bd, x)?;
        let h = blk.fc2.forward(bd, blk.fc1.forward(bd, h)?.silu()?)?;
        Ok(x.add(&h)?)
    }

    fn window_attention<'t>(&self, bd: &Binder<'t, '_>, blk: &Block, x: Var<'t>) -> Result<Var<'t>> {
        let tape = bd.tape();
        let shape = x.shape();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (w, heads) = (self.config.window, self.config.heads);
        let hd = d / heads;
        let nw = n.div_ceil(w);
        let padded = nw * w;
        let x = if padded > n {
            Var::concat(&[x, tape.constant(Tensor::zeros([b, padded - n, d]))], 1)?
        } else {
            x
        };
        let groups = b * nw * heads;
        let qkv = blk
            .qkv
            .forward(bd, x)?
            .reshape([b, nw, w, 3, heads, hd])?
            .permute(&[3, 0, 1, 4, 2, 5])?
            .reshape([3, groups, w, hd])?;
        let part = |i: usize| -> Result<Var<'t>> { Ok(qkv.narrow(0, i, 1)?.reshape([groups, w, hd])?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let mut scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(1.0 / (hd as f64).sqrt())?;
        if padded > n {
            let mut mask = Tensor::zeros([b, nw, heads, w, w]);
            for bi in 0..b {
                for hi in 0..heads {
                    for qi in 0..w {
                        for ki in w - (padded - n)..w {
                            mask.set(&[bi, nw - 1, hi, qi, ki], MASKED);
                        }
                    }
                }
            }
            scores = scores.add(&tape.constant(mask.reshape([groups, w, w])?))?;
        }
        let out = scores
            .softmax()?
            .matmul(&v)?
            .reshape([b, nw, heads, w, hd])?
            .permute(&[0, 1, 3, 2, 4])?
            .reshape([b, padded, d])?;
        let out = blk.proj.forward(bd, out)?;
        Ok(if padded > n { out.narrow(1, 0, n)? } else { out })
    }

    /// Encodes a batch of conditioning images `[B, 1, S, S]`.
    pub fn encode(&self, bd: &Binder<'_, '_>, y: &Tensor) -> Result<TokenSequence> {
        let tokens = self.forward(bd, bd.tape().constant(y.clone()))?;
        Ok(TokenSequence { tokens: (*tokens.value()).clone(), offsets: self.config.offsets() })
    }

    /// Places every scale's tokens on the finest patch grid (nearest repeat) and
    /// stacks them along features: `[B, N, d] -> [B, G, G, n_scales·d]`.
    pub fn to_finest_grid<'t>(&self, z_c: Var<'t>) -> Result<Var<'t>> {
        let b = z_c.shape()[0];
        let d = self.config.embed_dim;
        let g = self.config.finest_grid();
        let maps = self
            .config
            .offsets()
            .into_iter()
            .map(|(p, start, len)| {
                let side = self.config.input_size / p;
                let rep = g / side;
                let rows: Vec<usize> = (0..g * g).map(|i| (i / g / rep) * side + (i % g) / rep).collect();
                let per = z_c.narrow(1, start, len)?;
                // gather rows of each example through a flat index select
                let flat = per.reshape([b * len, d])?;
                let idx: Vec<usize> =
                    (0..b).flat_map(|bi| rows.iter().map(move |&r| bi * len + r)).collect();
                Ok(flat.index_select(&idx)?.reshape([b, g, g, d])?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::concat(&maps, 3)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let desk = PatchConfig::desk();
        assert_eq!(desk.counts(), vec![16, 64, 256]);
        assert_eq!(desk.num_tokens(), 336);
        assert_eq!(PatchConfig::paper().num_tokens(), 336);
        assert_eq!(desk.offsets(), vec![(16, 0, 16), (8, 16, 64), (4, 80, 256)]);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = PatchConfig { input_size: 60, ..PatchConfig::desk() };
        assert!(matches!(bad.validate(), Err(MoeError::Tensor(TensorError::Dimension { .. }))));
        let unsorted = PatchConfig { scales: vec![4, 8, 16], ..PatchConfig::desk() };
        assert!(unsorted.validate().is_err());
    }
}
