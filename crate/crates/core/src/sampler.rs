//! Reverse-chain inference over the experts.
//!
//! Every selected expert runs its own deterministic (η = 0) chain over all of
//! its timesteps. By default the final clean-latent estimates are combined
//! with the renormalized gate weights of the selected experts; per-step
//! mixing instead combines the estimates at every step of a shared lockstep
//! schedule. Full mode is top-K selection, so it shares one code path with
//! the asynchronous modes.

use std::str::FromStr;

use moediff_tensor::{Binder, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{aggregate, standard_normal};
use crate::error::{MoeError, Result};
use crate::gating::UsageState;
use crate::model::{MoeModel, EXPERTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    Full,
    /// Only the `k` highest-weighted experts run.
    Async(usize),
}

impl SampleMode {
    pub fn top_k(self) -> usize {
        match self {
            SampleMode::Full => EXPERTS,
            SampleMode::Async(k) => k,
        }
    }
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleMode::Full => write!(f, "full"),
            SampleMode::Async(k) => write!(f, "async{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    #[default]
    Final,
    PerStep,
}

/// Where each chain starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainStart {
    /// Pure Gaussian noise.
    Noise,
    /// The anchor latent noised to the chain's last timestep.
    #[default]
    LowRes,
}

impl FromStr for Mixing {
    type Err = MoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Mixing::Final),
            "per-step" | "per_step" => Ok(Mixing::PerStep),
            _ => Err(MoeError::Config(format!("unknown mixing {s:?} (final | per-step)"))),
        }
    }
}

impl FromStr for ChainStart {
    type Err = MoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(ChainStart::Noise),
            "lowres" | "low-res" => Ok(ChainStart::LowRes),
            _ => Err(MoeError::Config(format!("unknown chain start {s:?} (noise | lowres)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub mode: SampleMode,
    pub mixing: Mixing,
    pub start: ChainStart,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { mode: SampleMode::Full, mixing: Mixing::Final, start: ChainStart::LowRes, seed: 0 }
    }
}

pub struct SampleOutput {
    /// Combined clean latents `[B, C, h, w]`.
    pub z0: Tensor,
    /// Routed gates `[B, K]`.
    pub g: Tensor,
    /// Selected experts of each example, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Final estimate of each expert that ran (`[B, C, h, w]`, zero rows where not selected).
    pub estimates: Vec<Option<Tensor>>,
    /// Scalar parameters read during the call.
    pub touched_params: usize,
    /// Multiply-accumulates executed.
    pub macs: u64,
}

/// Indices of the `k` largest entries (ties to the lower index), ascending.
pub fn top_k(g: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    let mut sel = order[..k.min(g.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// Selected weights divided by their sum, as a dense `K` vector.
pub fn renormalized(g: &[f64], selected: &[usize]) -> Vec<f64> {
    let total: f64 = selected.iter().map(|&i| g[i]).sum();
    let mut out = vec![0.0; g.len()];
    for &i in selected {
        out[i] = g[i] / total;
    }
    out
}

/// Shared start noise of one example, independent of batch composition.
pub fn start_noise(seed: u64, example: usize, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(example as u64 + 1);
    standard_normal(shape, &mut rng)
}

use crate::codec::gather as rows;

fn scatter_rows(dst: &mut Tensor, idx: &[usize], src: &Tensor) {
    let per = dst.numel() / dst.shape()[0];
    for (j, &i) in idx.iter().enumerate() {
        dst.data_mut()[i * per..(i + 1) * per].copy_from_slice(&src.data()[j * per..(j + 1) * per]);
    }
}

/// Lockstep timestep of a chain of length `steps` at iteration `k` of `l`.
pub fn lockstep_t(steps: usize, k: usize, l: usize) -> usize {
    (steps * (l - k)).div_ceil(l)
}

impl MoeModel {
    /// Runs the reverse chains for a batch of upsampled conditioning images
    /// `[B, 1, S, S]`. `anchor` holds the latents the chains start from in
    /// [`ChainStart::LowRes`] mode.
    pub fn sample(
        &self,
        cond: &Tensor,
        anchor: Option<&Tensor>,
        usage: &UsageState,
        opts: &SampleOptions,
    ) -> Result<SampleOutput> {
        let k = opts.mode.top_k();
        if k == 0 || k > EXPERTS {
            return Err(MoeError::Config(format!("top-k must be in 1..={EXPERTS}, got {k}")));
        }
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &self.store, false);
        let b = cond.shape()[0];
        let [c, h, w] = self.config.latent_shape();
        let shape = [b, c, h, w];
        if opts.start == ChainStart::LowRes {
            match anchor {
                Some(a) if a.shape() == shape => {}
                Some(a) => return Err(MoeError::Contract(format!("anchor {:?}, expected {shape:?}", a.shape()))),
                None => return Err(MoeError::Contract("low-res chain start needs anchor latents".into())),
            }
        }

        let z_c = self.cond.forward(&bd, tape.constant(cond.clone()))?;
        let g = (*self.gate.forward(&bd, z_c, usage)?.g.value()).clone();
        let grid = (*self.cond.to_finest_grid(z_c)?.value()).clone();
        let selected: Vec<Vec<usize>> = (0..b).map(|i| top_k(&g.data()[i * EXPERTS..(i + 1) * EXPERTS], k)).collect();
        let weights: Vec<Vec<f64>> = (0..b)
            .map(|i| renormalized(&g.data()[i * EXPERTS..(i + 1) * EXPERTS], &selected[i]))
            .collect();
        let mut noise = Tensor::zeros(shape.to_vec());
        let per = c * h * w;
        for i in 0..b {
            noise.data_mut()[i * per..(i + 1) * per].copy_from_slice(start_noise(opts.seed, i, &[c, h, w]).data());
        }
        // Examples assigned to each expert.
        let members: Vec<Vec<usize>> =
            (0..EXPERTS).map(|e| (0..b).filter(|&i| selected[i].contains(&e)).collect()).collect();

        let start = |e: usize, idx: &[usize]| -> Result<Tensor> {
            let eps = rows(&noise, idx)?;
            match opts.start {
                ChainStart::Noise => Ok(eps),
                ChainStart::LowRes => {
                    let s = &self.schedules[e];
                    Ok(s.noise_with(&rows(anchor.expect("checked"), idx)?, &eps, s.steps())?)
                }
            }
        };
        let predict = |e: usize, idx: &[usize], z: &Tensor, t: usize| -> Result<Tensor> {
            let gate: Vec<f64> = idx.iter().map(|&i| g.data()[i * EXPERTS + e]).collect();
            let eps = self.experts[e].predict_eps(
                &bd,
                tape.constant(z.clone()),
                tape.constant(rows(&grid, idx)?),
                &vec![t; idx.len()],
                &gate,
            )?;
            self.schedules[e].estimate_z0(z, &eps.value(), t)
        };
        // Combines per-example estimates with each example's renormalized weights.
        let combine = |est: &[Option<Tensor>]| -> Result<Tensor> {
            let mut out = Tensor::zeros(shape.to_vec());
            for i in 0..b {
                let parts: Vec<Tensor> = selected[i]
                    .iter()
                    .map(|&e| {
                        let src = est[e].as_ref().expect("selected expert ran");
                        Tensor::new([per], src.data()[i * per..(i + 1) * per].to_vec()).expect("row")
                    })
                    .collect();
                let wts: Vec<f64> = selected[i].iter().map(|&e| weights[i][e]).collect();
                out.data_mut()[i * per..(i + 1) * per].copy_from_slice(aggregate(&parts, &wts)?.data());
            }
            Ok(out)
        };

        let mut estimates: Vec<Option<Tensor>> = vec![None; EXPERTS];
        let z0 = match opts.mixing {
            Mixing::Final => {
                for e in 0..EXPERTS {
                    let idx = &members[e];
                    if idx.is_empty() {
                        continue;
                    }
                    let s = &self.schedules[e];
                    let mut z = start(e, idx)?;
                    let mut z0_hat = z.clone();
                    for t in (1..=s.steps()).rev() {
                        z0_hat = predict(e, idx, &z, t)?;
                        z = s.ddim_step(&z, &z0_hat, t, t - 1)?;
                    }
                    let mut full = Tensor::zeros(shape.to_vec());
                    scatter_rows(&mut full, idx, &z0_hat);
                    estimates[e] = Some(full);
                }
                combine(&estimates)?
            }
            Mixing::PerStep => {
                let l = self.config.steps.iter().copied().max().expect("three experts");
                let mut z: Vec<Option<Tensor>> = (0..EXPERTS)
                    .map(|e| if members[e].is_empty() { Ok(None) } else { start(e, &members[e]).map(Some) })
                    .collect::<Result<_>>()?;
                let mut mixed = Tensor::zeros(shape.to_vec());
                for it in 0..l {
                    let mut stepping = Vec::new();
                    for e in 0..EXPERTS {
                        let steps = self.schedules[e].steps();
                        let (t, t_next) = (lockstep_t(steps, it, l), lockstep_t(steps, it + 1, l));
                        // an expert that is not due to step keeps its last estimate,
                        // but every expert needs one before the first mix
                        if members[e].is_empty() || (t == t_next && estimates[e].is_some()) {
                            continue;
                        }
                        let est = predict(e, &members[e], z[e].as_ref().expect("running"), t)?;
                        let mut full = Tensor::zeros(shape.to_vec());
                        scatter_rows(&mut full, &members[e], &est);
                        estimates[e] = Some(full);
                        if t != t_next {
                            stepping.push((e, t, t_next));
                        }
                    }
                    mixed = combine(&estimates)?;
                    for (e, t, t_next) in stepping {
                        let zt = z[e].as_ref().expect("running");
                        let target = rows(&mixed, &members[e])?;
                        z[e] = Some(self.schedules[e].ddim_step(zt, &target, t, t_next)?);
                    }
                }
                mixed
            }
        };
        Ok(SampleOutput {
            z0,
            g,
            selected,
            estimates,
            touched_params: bd.touched_numel(),
            macs: tape.macs(),
        })
    }
}
