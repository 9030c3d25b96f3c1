//! The assembled mixture: condition encoder, gate and experts over one parameter
//! store, plus the joint training forward pass.

use moediff_tensor::{Binder, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::condition::{ConditionEncoder, PatchConfig};
use crate::diffusion::{NoiseSchedule, DESK_STEPS, PAPER_STEPS};
use crate::error::{MoeError, Result};
use crate::experts::{Expert, ExpertConfig, ExpertKind};
use crate::gating::{GateNetwork, UsageState, DEFAULT_GAMMA, DEFAULT_USAGE_DECAY};
use crate::losses::{self, FixedPerceptualBank, LossReport, VarianceTracker};
use crate::nn::Init;

pub const EXPERTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub patch: PatchConfig,
    pub codec: CodecConfig,
    pub expert_channels: usize,
    pub time_dim: usize,
    /// Chain length of each expert.
    pub steps: Vec<usize>,
    pub gamma: f64,
    pub usage_decay: f64,
    /// Window sides of the short-time spectral loss.
    pub stft_windows: Vec<usize>,
    /// Let the diversity regularizer backpropagate into the experts. Off by
    /// default: with a large uncertainty weight it pushes every expert's
    /// estimate away from the shared target.
    #[serde(default)]
    pub diversity_grad: bool,
    pub seed: u64,
}

impl MoeConfig {
    pub fn desk() -> Self {
        Self {
            patch: PatchConfig::desk(),
            codec: CodecConfig::desk(),
            expert_channels: 32,
            time_dim: 32,
            steps: DESK_STEPS.to_vec(),
            gamma: DEFAULT_GAMMA,
            usage_decay: DEFAULT_USAGE_DECAY,
            stft_windows: vec![4, 8, 16],
            diversity_grad: false,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            patch: PatchConfig::paper(),
            codec: CodecConfig::paper(),
            expert_channels: 128,
            time_dim: 128,
            steps: PAPER_STEPS.to_vec(),
            stft_windows: vec![8, 16, 32],
            ..Self::desk()
        }
    }

    pub fn latent_size(&self) -> usize {
        self.patch.input_size / 4
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [self.codec.code_dim, s, s]
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.patch.input_size % 4 != 0 {
            return Err(MoeError::Config(format!("input size {} must be divisible by 4", self.patch.input_size)));
        }
        if self.steps.len() != EXPERTS || self.steps.contains(&0) {
            return Err(MoeError::Config(format!("need {EXPERTS} positive chain lengths, got {:?}", self.steps)));
        }
        let s = self.latent_size();
        if s % 4 != 0 {
            return Err(MoeError::Config(format!("latent size {s} must be divisible by 4")));
        }
        if let Some(w) = self.stft_windows.iter().find(|&&w| w == 0 || w > s) {
            return Err(MoeError::Config(format!("STFT window {w} does not fit latent {s}x{s}")));
        }
        if self.stft_windows.is_empty() {
            return Err(MoeError::Config("at least one STFT window is required".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 || self.expert_channels % 2 != 0 {
            return Err(MoeError::Config("time_dim and expert_channels must be even".into()));
        }
        if !(0.0..1.0).contains(&self.usage_decay) || self.gamma < 0.0 {
            return Err(MoeError::Config("usage_decay must be in [0,1) and gamma >= 0".into()));
        }
        Ok(())
    }

    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            latent_channels: self.codec.code_dim,
            latent_size: self.latent_size(),
            cond_features: self.patch.scales.len() * self.patch.embed_dim,
            cond_grid: self.patch.finest_grid(),
            base_channels: self.expert_channels,
            time_dim: self.time_dim,
        }
    }
}

/// Parameter-name prefixes of the model's modules.
pub const COND_PREFIX: &str = "cond.";
pub const GATE_PREFIX: &str = "gate.";

pub fn expert_prefix(i: usize) -> String {
    format!("expert{}.", i + 1)
}

pub struct MoeModel {
    pub config: MoeConfig,
    pub store: ParamStore,
    pub cond: ConditionEncoder,
    pub gate: GateNetwork,
    pub experts: Vec<Expert>,
    pub schedules: Vec<NoiseSchedule>,
    pub bank: FixedPerceptualBank,
}

impl MoeModel {
    pub fn new(config: MoeConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut store, &mut rng, "");
        let cond = ConditionEncoder::new(&mut init, config.patch.clone())?;
        let gate = GateNetwork::new(&mut init, config.patch.embed_dim, EXPERTS);
        let ecfg = config.expert_config();
        let experts = ExpertKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| Expert::new(&mut init, i, kind, ecfg.clone()))
            .collect();
        let schedules = config.steps.iter().map(|&t| NoiseSchedule::linear(t)).collect::<Result<_>>()?;
        Ok(Self { config, store, cond, gate, experts, schedules, bank: FixedPerceptualBank::new() })
    }

    /// `(module, parameter count)` rows; the counts add up to the store total.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        let mut rows = vec![
            ("condition_encoder".to_string(), self.store.numel_with_prefix(COND_PREFIX)),
            ("gate".to_string(), self.store.numel_with_prefix(GATE_PREFIX)),
        ];
        for i in 0..EXPERTS {
            rows.push((format!("expert{}", i + 1), self.store.numel_with_prefix(&expert_prefix(i))));
        }
        rows
    }

    /// Parameters shared by every inference mode (condition encoder and gate).
    pub fn shared_params(&self) -> usize {
        self.store.numel_with_prefix(COND_PREFIX) + self.store.numel_with_prefix(GATE_PREFIX)
    }

    pub fn expert_params(&self, i: usize) -> usize {
        self.store.numel_with_prefix(&expert_prefix(i))
    }
}

/// Inputs of one training step.
#[derive(Clone, Debug)]
pub struct StepInput {
    /// Upsampled low-resolution conditioning images `[B, 1, S, S]`.
    pub cond: Tensor,
    /// Clean latents `[B, C, h, w]`.
    pub z0: Tensor,
    /// Timestep of each example for each expert, `K × B`.
    pub t: Vec<Vec<usize>>,
    /// Noise of each expert, `K × [B, C, h, w]`.
    pub eps: Vec<Tensor>,
    /// Replace routed gates with uniform weights in the expert loss.
    pub warmup: bool,
    /// Values to use for the objective's constants instead of deriving them
    /// from this step's forward pass.
    pub frozen: Option<StepConstants>,
}

/// Quantities the objective computes from the forward pass but does not
/// differentiate through.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConstants {
    /// Gates `[B, K]` fed to the experts as an input channel.
    pub gate_channel: Tensor,
    /// Supervised gate targets `[B, K]`.
    pub targets: Tensor,
}

/// Recorded losses of one step plus what the caller needs to update state.
pub struct StepOutput<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
    /// Routed gates `[B, K]` before any warm-up override.
    pub g: Tensor,
    /// Gates actually used in the expert loss.
    pub g_effective: Tensor,
    pub constants: StepConstants,
}

/// Per-example noising at mixed timesteps: returns `(z_t, √ᾱ, √(1−ᾱ))` with
/// the coefficients broadcastable as `[B, 1, 1, 1]`.
pub fn noise_batch(schedule: &NoiseSchedule, z0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let b = z0.shape()[0];
    if t.len() != b || eps.shape() != z0.shape() {
        return Err(MoeError::Contract(format!("{} timesteps / eps {:?} for z0 {:?}", t.len(), eps.shape(), z0.shape())));
    }
    let per = z0.numel() / b;
    let mut zt = Tensor::zeros(z0.shape().to_vec());
    let mut sa = Tensor::zeros([b, 1, 1, 1]);
    let mut sb = Tensor::zeros([b, 1, 1, 1]);
    for (bi, &ti) in t.iter().enumerate() {
        let r = bi * per..(bi + 1) * per;
        let one = Tensor::new([per], z0.data()[r.clone()].to_vec())?;
        let e = Tensor::new([per], eps.data()[r.clone()].to_vec())?;
        let noisy = schedule.noise_with(&one, &e, ti)?;
        zt.data_mut()[r].copy_from_slice(noisy.data());
        let a = schedule.alpha_bar(ti);
        sa.data_mut()[bi] = a.sqrt();
        sb.data_mut()[bi] = (1.0 - a).sqrt();
    }
    Ok((zt, sa, sb))
}

fn column(g: &Tensor, i: usize) -> Vec<f64> {
    let k = g.shape()[1];
    (0..g.shape()[0]).map(|b| g.data()[b * k + i]).collect()
}

impl MoeModel {
    /// Records the joint objective for one batch. The variance tracker is
    /// advanced here because the loss weight depends on it; usage is left to
    /// the caller.
    pub fn training_forward<'t>(
        &self,
        bd: &Binder<'t, '_>,
        input: &StepInput,
        usage: &UsageState,
        tracker: &mut VarianceTracker,
    ) -> Result<StepOutput<'t>> {
        let tape = bd.tape();
        let b = input.z0.shape()[0];
        if input.t.len() != EXPERTS || input.eps.len() != EXPERTS {
            return Err(MoeError::Contract("one timestep vector and noise tensor per expert".into()));
        }
        let z_c = self.cond.forward(bd, tape.constant(input.cond.clone()))?;
        let routed = self.gate.forward(bd, z_c, usage)?;
        let g = (*routed.g.value()).clone();
        let (g_loss, g_effective) = if input.warmup {
            let u = Tensor::full([b, EXPERTS], 1.0 / EXPERTS as f64);
            (tape.constant(u.clone()), u)
        } else {
            (routed.g, g.clone())
        };
        let gate_channel = input.frozen.as_ref().map_or(&g_effective, |f| &f.gate_channel);
        let grid = self.cond.to_finest_grid(z_c)?;
        let z0 = tape.constant(input.z0.clone());

        let mut per_expert = Vec::with_capacity(EXPERTS);
        let mut estimates = Vec::with_capacity(EXPERTS);
        let mut report = LossReport::default();
        for (i, expert) in self.experts.iter().enumerate() {
            let (zt, sa, sb) = noise_batch(&self.schedules[i], &input.z0, &input.eps[i], &input.t[i])?;
            let gate_i = column(gate_channel, i);
            let eps_hat = expert.predict_eps(bd, tape.constant(zt.clone()), grid, &input.t[i], &gate_i)?;
            // ẑ0 = (z_t − √(1−ᾱ)·ε̂)/√ᾱ
            let inv = sa.map(|v| 1.0 / v);
            let z0_hat = tape
                .constant(zt.clone())
                .mul(&tape.constant(inv.clone()))?
                .sub(&eps_hat.mul(&tape.constant(sb.mul(&inv)?))?)?;
            let diff = losses::mse_per_example(eps_hat, tape.constant(input.eps[i].clone()))?;
            let task = match expert.kind {
                ExpertKind::Edge => losses::task1_per_example(&self.bank, z0, z0_hat)?,
                ExpertKind::Dense => losses::task2_per_example(z0, z0_hat)?,
                ExpertKind::Attention => losses::task3_per_example(z0, z0_hat, &self.config.stft_windows)?,
            };
            report.diffusion.push(diff.value().mean());
            report.task.push(task.value().mean());
            per_expert.push(diff.add(&task)?);
            estimates.push(z0_hat);
        }
        let l_e = losses::expert_losses(g_loss, &per_expert)?;

        let values: Vec<Tensor> = estimates.iter().map(|e| (*e.value()).clone()).collect();
        let cos = losses::estimate_cosines(&input.z0, &values)?;
        let temperature = losses::mad_temperature(cos.data())?;
        let target = match &input.frozen {
            Some(f) => f.targets.clone(),
            None => losses::supervised_gate_targets(&cos, temperature)?,
        };
        let diversity_inputs: Vec<Var<'t>> = if self.config.diversity_grad {
            estimates
        } else {
            values.iter().map(|v| tape.constant(v.clone())).collect()
        };
        let (sup, div) = losses::gating_loss(routed.g, &target, &diversity_inputs)?;
        let l_gating = sup.add(&div)?;
        let w = tracker.update(l_gating.item()?);
        let total = losses::total_loss(l_e, l_gating, w)?;

        report.expert_loss = l_e.item()?;
        report.supervised = sup.item()?;
        report.diversity = div.item()?;
        report.gating_loss = l_gating.item()?;
        report.weight = w;
        report.total = report.expert_loss + w * report.gating_loss;
        report.temperature = temperature;
        report.gates = (0..EXPERTS).map(|i| column(&g_effective, i).iter().sum::<f64>() / b as f64).collect();
        report.usage = usage.c.clone();
        let constants = StepConstants { gate_channel: gate_channel.clone(), targets: target };
        Ok(StepOutput { total, report, g, g_effective, constants })
    }
}
