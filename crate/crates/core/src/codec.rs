//! Vector-quantized image codec mapping `[x, b, g]` slices to a 4x smaller latent grid.

use moediff_tensor::optim::{AdamW, AdamWConfig};
use moediff_tensor::{Binder, Conv2dOpts, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::nn::{Conv2d, ConvT2d, Init, ResBlock};
use crate::phantom::SlicePair;

/// Encoder input channels: image, bias field, two warp components.
pub const INPUT_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub base_channels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub scale_factor: f64,
    pub commitment: f64,
}

impl CodecConfig {
    pub fn desk() -> Self {
        Self { base_channels: 32, codebook_size: 64, code_dim: 16, scale_factor: 0.2, commitment: 0.25 }
    }

    pub fn paper() -> Self {
        Self { base_channels: 128, codebook_size: 1024, code_dim: 512, scale_factor: 0.2, commitment: 0.25 }
    }
}

/// Latent grid `[D, h, w]` (or `[B, D, h, w]`) in scaled units.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub scale_factor: f64,
}

#[derive(Clone, Debug)]
pub struct VqLosses {
    pub codebook: f64,
    pub commitment: f64,
}

struct Encoder {
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    res: [ResBlock; 2],
    out: Conv2d,
}

struct Decoder {
    stem: Conv2d,
    res: [ResBlock; 2],
    up1: ConvT2d,
    up2: ConvT2d,
    out: Conv2d,
}

pub struct VqCodec {
    pub config: CodecConfig,
    pub store: ParamStore,
    codebook: ParamId,
    enc: Encoder,
    dec: Decoder,
}

/// Differentiable pieces of a quantization step.
pub struct Quantized<'t> {
    /// Scaled quantized latent with straight-through gradient onto the input.
    pub z_q: Var<'t>,
    pub indices: Vec<usize>,
    pub codebook_loss: Var<'t>,
    pub commitment_loss: Var<'t>,
}

fn down_opts() -> Conv2dOpts {
    Conv2dOpts::new(2, 1, 1)
}

/// Nearest codebook row for every row of `vectors` (`[n, d]`), by squared L2 distance.
/// Ties resolve to the lowest index.
pub fn nearest_codes(vectors: &Tensor, codebook: &Tensor) -> Vec<usize> {
    let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
    let norms: Vec<f64> = codebook.data().chunks(d).map(|e| e.iter().map(|v| v * v).sum()).collect();
    let dots = vectors.matmul(&codebook.transpose2().expect("2-D")).expect("shapes");
    dots.data()
        .chunks(k)
        .map(|row| {
            let mut best = (f64::INFINITY, 0);
            for (j, (&dot, &n)) in row.iter().zip(&norms).enumerate() {
                let dist = n - 2.0 * dot;
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect()
}

impl VqCodec {
    pub fn new(config: CodecConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, half, d) = (config.base_channels, config.base_channels / 2, config.code_dim);
        let mut root = Init::new(&mut store, &mut rng, "codec.");
        let codebook = root.uniform("codebook", &[config.codebook_size, d], 1.0 / config.codebook_size as f64);
        let enc = {
            let mut p = root.sub("encoder");
            Encoder {
                stem: Conv2d::same(&mut p, "stem", INPUT_CHANNELS, half, 3),
                down1: Conv2d::new(&mut p, "down1", half, c, 4, down_opts()),
                down2: Conv2d::new(&mut p, "down2", c, c, 4, down_opts()),
                res: [ResBlock::new(&mut p, "res1", c), ResBlock::new(&mut p, "res2", c)],
                out: Conv2d::same(&mut p, "out", c, d, 1),
            }
        };
        let dec = {
            let mut p = root.sub("decoder");
            Decoder {
                stem: Conv2d::same(&mut p, "stem", d, c, 3),
                res: [ResBlock::new(&mut p, "res1", c), ResBlock::new(&mut p, "res2", c)],
                up1: ConvT2d::new(&mut p, "up1", c, c, 4, 2, 1),
                up2: ConvT2d::new(&mut p, "up2", c, half, 4, 2, 1),
                out: Conv2d::same(&mut p, "out", half, 1, 3),
            }
        };
        Self { config, store, codebook, enc, dec }
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// `[B, 4, S, S] -> [B, D, S/4, S/4]`, multiplied by the scale factor.
    pub fn encode_var<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(moediff_tensor::TensorError::Dimension {
                op: "encode",
                detail: format!("expected [B,4,S,S] with S divisible by 4, got {shape:?}"),
            }
            .into());
        }
        let e = &self.enc;
        let h = e.stem.forward(bd, x)?.silu()?;
        let h = e.down1.forward(bd, h)?.silu()?;
        let h = e.down2.forward(bd, h)?;
        let h = e.res[1].forward(bd, e.res[0].forward(bd, h)?)?;
        Ok(e.out.forward(bd, h.silu()?)?.scale(self.config.scale_factor)?)
    }

    /// Snaps each latent vector to its nearest codeword (compared in unscaled units).
    pub fn quantize_var<'t>(&self, bd: &Binder<'t, '_>, z: Var<'t>) -> Result<Quantized<'t>> {
        let shape = z.shape();
        let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let s = self.config.scale_factor;
        let unscaled = z.scale(1.0 / s)?;
        let flat = unscaled.permute(&[0, 2, 3, 1])?.reshape([b * h * w, d])?;
        let indices = nearest_codes(&flat.value(), self.codebook());
        let picked = bd.var(self.codebook).index_select(&indices)?;
        let codebook_loss = flat.detach().mse(&picked)?;
        let commitment_loss = flat.mse(&picked.detach())?.scale(self.config.commitment)?;
        let e = picked.value().reshape([b, h, w, d])?.permute(&[0, 3, 1, 2])?.scale(s);
        Ok(Quantized { z_q: z.straight_through(e)?, indices, codebook_loss, commitment_loss })
    }

    /// `[B, D, h, w] -> [B, 1, 4h, 4w]`, unclamped.
    pub fn decode_var<'t>(&self, bd: &Binder<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != self.config.code_dim {
            return Err(moediff_tensor::TensorError::Dimension {
                op: "decode",
                detail: format!("expected [B,{},h,w], got {shape:?}", self.config.code_dim),
            }
            .into());
        }
        let dd = &self.dec;
        let h = dd.stem.forward(bd, z.scale(1.0 / self.config.scale_factor)?)?;
        let h = dd.res[1].forward(bd, dd.res[0].forward(bd, h)?)?;
        let h = dd.up1.forward(bd, h.silu()?)?.silu()?;
        let h = dd.up2.forward(bd, h)?.silu()?;
        dd.out.forward(bd, h)
    }

    /// Stacks `x`, `b`, `g` into an encoder input `[4, S, S]`.
    pub fn stack_input(x: &Tensor, b: &Tensor, g: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 1 || b.shape() != s || g.shape() != [2, s[1], s[2]] {
            return Err(moediff_tensor::TensorError::Dimension {
                op: "encode",
                detail: format!("x {:?}, b {:?}, g {:?}", x.shape(), b.shape(), g.shape()),
            }
            .into());
        }
        Ok(Tensor::concat(&[x, b, g], 0)?)
    }

    /// Encodes a single slice.
    pub fn encode(&self, x: &Tensor, b: &Tensor, g: &Tensor) -> Result<LatentCode> {
        if b.data().iter().any(|&v| v <= 0.0) {
            return Err(MoeError::Contract("bias field must be strictly positive".into()));
        }
        let input = Self::stack_input(x, b, g)?;
        let z = self.encode_batch(&input.reshape([1, INPUT_CHANNELS, x.shape()[1], x.shape()[2]])?)?;
        let shape = z.shape()[1..].to_vec();
        Ok(LatentCode { z: z.reshape(shape)?, scale_factor: self.config.scale_factor })
    }

    pub fn encode_batch(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &self.store, false);
        Ok((*self.encode_var(&bd, tape.constant(input.clone()))?.value()).clone())
    }

    pub fn quantize(&self, code: &LatentCode) -> Result<(LatentCode, Vec<usize>, VqLosses)> {
        let (z, batched) = as_batch(&code.z)?;
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &self.store, false);
        let scaled = tape.constant(z.scale(self.config.scale_factor / code.scale_factor));
        let q = self.quantize_var(&bd, scaled)?;
        let mut zq = (*q.z_q.value()).clone().scale(code.scale_factor / self.config.scale_factor);
        if !batched {
            zq = zq.reshape(code.z.shape().to_vec())?;
        }
        let losses = VqLosses { codebook: q.codebook_loss.item()?, commitment: q.commitment_loss.item()? };
        Ok((LatentCode { z: zq, scale_factor: code.scale_factor }, q.indices, losses))
    }

    /// Decodes to `[1, S, S]` (or `[B, 1, S, S]`) clamped to `[0, 1]`.
    pub fn decode(&self, code: &LatentCode) -> Result<Tensor> {
        let (z, batched) = as_batch(&code.z)?;
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &self.store, false);
        let z = tape.constant(z.scale(self.config.scale_factor / code.scale_factor));
        let out = self.decode_var(&bd, z)?.value().map(|v| v.clamp(0.0, 1.0));
        if batched {
            Ok(out)
        } else {
            let s = out.shape()[1..].to_vec();
            Ok(out.reshape(s)?)
        }
    }
}

fn as_batch(z: &Tensor) -> Result<(Tensor, bool)> {
    match *z.shape() {
        [d, h, w] => Ok((z.reshape([1, d, h, w])?, false)),
        [_, _, _, _] => Ok((z.clone(), true)),
        _ => Err(moediff_tensor::TensorError::Dimension {
            op: "latent",
            detail: format!("expected [D,h,w] or [B,D,h,w], got {:?}", z.shape()),
        }
        .into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Codewords unused over this many steps are re-seeded from encoder outputs.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, lr: 2e-3, restart_every: 100, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CodecTrainReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Reconstruction MSE per step.
    pub recon: Vec<f64>,
    pub restarts: usize,
}

/// Encoder inputs `[N, 4, S, S]` and targets `[N, 1, S, S]` for a set of pairs.
pub fn codec_tensors(pairs: &[SlicePair]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> =
        pairs.iter().map(|p| VqCodec::stack_input(&p.hr, &p.bias, &p.warp)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let hr: Vec<&Tensor> = pairs.iter().map(|p| &p.hr).collect();
    let s = pairs.first().map(|p| p.hr.shape()[1]).ok_or(MoeError::Config("no training pairs".into()))?;
    let n = pairs.len();
    Ok((
        Tensor::concat(&refs, 0)?.reshape([n, INPUT_CHANNELS, s, s])?,
        Tensor::concat(&hr, 0)?.reshape([n, 1, s, s])?,
    ))
}

pub(crate) fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    Ok(Tensor::new(shape, data)?)
}

/// Overfits the codec on `pairs` with AdamW: reconstruction MSE plus the VQ terms.
pub fn train_codec(codec: &mut VqCodec, pairs: &[SlicePair], cfg: &CodecTrainConfig) -> Result<CodecTrainReport> {
    let (inputs, targets) = codec_tensors(pairs)?;
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&codec.store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let (d, k) = (codec.config.code_dim, codec.config.codebook_size);
    let mut used = vec![false; k];
    let mut report = CodecTrainReport { losses: Vec::new(), recon: Vec::new(), restarts: 0 };

    // seed the codebook with encoder outputs so that every codeword starts in use
    {
        let z = codec.encode_batch(&inputs)?;
        let vecs = z.scale(1.0 / codec.config.scale_factor).permute(&[0, 2, 3, 1])?;
        let rows = vecs.numel() / d;
        let vecs = vecs.reshape([rows, d])?;
        let picks: Vec<usize> = (0..k).map(|_| rng.random_range(0..rows)).collect();
        codec.store.set(codec.codebook, gather(&vecs, &picks)?)?;
    }

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let x = gather(&inputs, &batch)?;
        let y = gather(&targets, &batch)?;
        let tape = Tape::new();
        let bd = Binder::new(&tape, &codec.store, true);
        let z = codec.encode_var(&bd, tape.constant(x))?;
        let q = codec.quantize_var(&bd, z)?;
        let recon = codec.decode_var(&bd, q.z_q)?.mse(&tape.constant(y))?;
        let loss = recon.add(&q.codebook_loss)?.add(&q.commitment_loss)?;
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(MoeError::NonFiniteLoss { step, last_checkpoint: "none".into() });
        }
        report.losses.push(lv);
        report.recon.push(recon.item()?);
        tape.backward(loss)?;
        let grads = bd.grads();
        drop(bd);
        opt.update(&mut codec.store, &grads, cfg.lr)?;
        for &i in &q.indices {
            used[i] = true;
        }
        if cfg.restart_every > 0 && (step + 1) % cfg.restart_every == 0 && step + 1 < cfg.steps {
            let dead: Vec<usize> = (0..k).filter(|&i| !used[i]).collect();
            if !dead.is_empty() {
                let z = codec.encode_batch(&inputs)?;
                let vecs = z.scale(1.0 / codec.config.scale_factor).permute(&[0, 2, 3, 1])?;
                let rows = vecs.numel() / d;
                let vecs = vecs.reshape([rows, d])?;
                let book = codec.store.value_mut(codec.codebook);
                for &j in &dead {
                    let r = rng.random_range(0..rows);
                    book.data_mut()[j * d..(j + 1) * d].copy_from_slice(&vecs.data()[r * d..(r + 1) * d]);
                }
                report.restarts += dead.len();
            }
            used.iter_mut().for_each(|u| *u = false);
        }
    }
    Ok(report)
}

/// Rescales the latent space so that scaled latents of `pairs` have unit standard
/// deviation. The encoder output layer and the codebook are multiplied by the gain and
/// the decoder input layer divided by it, so reconstructions and code assignments are
/// unchanged. Returns the gain.
pub fn standardize_latents(codec: &mut VqCodec, pairs: &[SlicePair]) -> Result<f64> {
    let (inputs, _) = codec_tensors(pairs)?;
    let z = codec.encode_batch(&inputs)?;
    let mean = z.mean();
    let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.numel() as f64;
    if !(var.is_finite() && var > 0.0) {
        return Err(MoeError::Contract(format!("degenerate latent variance {var}")));
    }
    let gain = 1.0 / var.sqrt();
    let out = &codec.enc.out;
    let ids = [Some(out.weight), out.bias, Some(codec.codebook)];
    for id in ids.into_iter().flatten() {
        codec.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    let stem = codec.dec.stem.weight;
    codec.store.value_mut(stem).data_mut().iter_mut().for_each(|v| *v /= gain);
    Ok(gain)
}

/// Fraction of codewords chosen at least once when encoding `pairs`.
pub fn codebook_usage(codec: &VqCodec, pairs: &[SlicePair]) -> Result<f64> {
    let (inputs, _) = codec_tensors(pairs)?;
    let z = codec.encode_batch(&inputs)?;
    let (_, idx, _) = codec.quantize(&LatentCode { z, scale_factor: codec.config.scale_factor })?;
    let mut used = vec![false; codec.config.codebook_size];
    idx.iter().for_each(|&i| used[i] = true);
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VqCodec {
        VqCodec::new(CodecConfig { base_channels: 8, codebook_size: 5, code_dim: 3, ..CodecConfig::desk() }, 1)
    }

    fn slice(s: usize) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::from_fn([1, s, s], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5),
            Tensor::ones([1, s, s]),
            Tensor::zeros([2, s, s]),
        )
    }

    #[test]
    fn latent_is_quarter_size() {
        let c = small();
        let (x, b, g) = slice(16);
        let z = c.encode(&x, &b, &g).unwrap();
        assert_eq!(z.z.shape(), &[3, 4, 4]);
        assert_eq!(c.decode(&z).unwrap().shape(), &[1, 16, 16]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let c = small();
        let (x, b, _) = slice(16);
        assert!(c.encode(&x, &b, &Tensor::zeros([1, 16, 16])).is_err());
        assert!(c.decode(&LatentCode { z: Tensor::zeros([4, 4, 4]), scale_factor: 0.2 }).is_err());
    }

    #[test]
    fn single_entry_codebook_maps_everything_to_zero() {
        let c = VqCodec::new(CodecConfig { base_channels: 8, codebook_size: 1, code_dim: 3, ..CodecConfig::desk() }, 0);
        let z = LatentCode { z: Tensor::from_fn([3, 4, 4], |i| i as f64), scale_factor: 0.2 };
        let (_, idx, _) = c.quantize(&z).unwrap();
        assert!(idx.iter().all(|&i| i == 0));
    }

    #[test]
    fn codewords_are_fixed_points() {
        let c = small();
        let book = c.codebook().clone();
        // place codeword 2 at every position, in scaled units
        let mut z = Tensor::zeros([3, 2, 2]);
        for ch in 0..3 {
            for p in 0..4 {
                z.data_mut()[ch * 4 + p] = book.at(&[2, ch]) * 0.2;
            }
        }
        let code = LatentCode { z: z.clone(), scale_factor: 0.2 };
        let (zq, idx, losses) = c.quantize(&code).unwrap();
        assert!(idx.iter().all(|&i| i == 2));
        assert!(zq.z.max_abs_diff(&z).unwrap() < 1e-15);
        assert!(losses.codebook < 1e-30 && losses.commitment < 1e-30);
    }
}
