//! Joint training of the condition encoder, gate and experts over a frozen codec.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use moediff_tensor::optim::{AdamW, AdamWConfig};
use moediff_tensor::{Binder, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{gather, CodecConfig, CodecTrainConfig, VqCodec};
use crate::condition::PatchConfig;
use crate::diffusion::{standard_normal, DESK_STEPS, PAPER_STEPS};
use crate::error::{MoeError, Result};
use crate::gating::UsageState;
use crate::imaging::resize_bicubic;
use crate::losses::{LossReport, VarianceTracker};
use crate::model::{MoeConfig, MoeModel, StepInput, EXPERTS};
use crate::phantom::SlicePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrRamp {
    /// Linear ramp restarted every period.
    Sawtooth,
    /// One linear ramp at the start, then constant.
    Once,
}

impl FromStr for LrRamp {
    type Err = MoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sawtooth" => Ok(LrRamp::Sawtooth),
            "once" => Ok(LrRamp::Once),
            _ => Err(MoeError::Config(format!("unknown lr_ramp {s:?} (sawtooth | once)"))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: MoeConfig,
    pub base_lr: f64,
    pub lr_ramp: LrRamp,
    pub lr_period: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of epochs whose expert loss uses uniform gates.
    pub warmup_fraction: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Feed the true bias field to the codec; otherwise a unit field.
    pub use_bias: bool,
    /// Feed the true displacement field to the codec; otherwise zero.
    pub use_warp: bool,
    pub seed: u64,
    pub codec_steps: usize,
    pub codec_lr: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: MoeConfig::desk(),
            base_lr: 2e-3,
            lr_ramp: LrRamp::Sawtooth,
            lr_period: 100,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 500,
            warmup_fraction: 0.2,
            checkpoint_every: 100,
            use_bias: true,
            use_warp: true,
            seed: 0,
            codec_steps: 2000,
            codec_lr: 2e-3,
        }
    }

    pub fn paper() -> Self {
        Self { model: MoeConfig::paper(), base_lr: 1e-6, batch_size: 32, epochs: 5000, ..Self::desk() }
    }

    /// Narrow networks and a handful of epochs on 64×64 data; runs in seconds.
    /// Meant for tests and for trying the command line.
    pub fn micro() -> Self {
        let mut model = MoeConfig::desk();
        model.patch = PatchConfig { scales: vec![16, 8], embed_dim: 16, heads: 2, layers: 1, ..PatchConfig::desk() };
        model.codec = CodecConfig { base_channels: 8, codebook_size: 16, code_dim: 4, ..CodecConfig::desk() };
        model.expert_channels = 8;
        model.time_dim = 8;
        model.steps = vec![4, 6, 5];
        Self { model, batch_size: 4, epochs: 6, checkpoint_every: 3, codec_steps: 40, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "micro" => Ok(Self::micro()),
            _ => Err(MoeError::Config(format!("unknown preset {name:?} (desk | paper | micro)"))),
        }
    }

    /// Epochs `0..warmup_epochs()` run with uniform gates.
    pub fn warmup_epochs(&self) -> usize {
        (self.epochs as f64 * self.warmup_fraction).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let p = self.lr_period.max(1);
        let ramp = match self.lr_ramp {
            LrRamp::Sawtooth => (step % p + 1) as f64 / p as f64,
            LrRamp::Once => ((step + 1) as f64 / p as f64).min(1.0),
        };
        self.base_lr * ramp
    }

    pub fn codec_train(&self) -> CodecTrainConfig {
        CodecTrainConfig { steps: self.codec_steps, lr: self.codec_lr, seed: self.seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.base_lr > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.lr_period == 0 {
            return Err(MoeError::Config("base_lr, batch_size, epochs and lr_period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(MoeError::Config("warmup_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| MoeError::Config(format!("bad value {v:?} for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|s| parse(key, s.trim())).collect()
        }
        let m = &mut self.model;
        match key {
            "preset" => {
                let seed = self.seed;
                *self = Self::preset(value)?;
                self.seed = seed;
                self.model.seed = seed;
            }
            "base_lr" => self.base_lr = parse(key, value)?,
            "lr_ramp" => self.lr_ramp = value.parse()?,
            "lr_period" => self.lr_period = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "use_bias" => self.use_bias = parse(key, value)?,
            "use_warp" => self.use_warp = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                m.seed = self.seed;
            }
            "codec_steps" => self.codec_steps = parse(key, value)?,
            "codec_lr" => self.codec_lr = parse(key, value)?,
            "scale_factor" => m.codec.scale_factor = parse(key, value)?,
            "codebook_size" => m.codec.codebook_size = parse(key, value)?,
            "code_dim" => m.codec.code_dim = parse(key, value)?,
            "codec_channels" => m.codec.base_channels = parse(key, value)?,
            "expert_steps" => {
                m.steps = match value {
                    "desk" => DESK_STEPS.to_vec(),
                    "paper" => PAPER_STEPS.to_vec(),
                    _ => list(key, value)?,
                }
            }
            "expert_channels" => m.expert_channels = parse(key, value)?,
            "time_dim" => m.time_dim = parse(key, value)?,
            "gamma" => m.gamma = parse(key, value)?,
            "usage_decay" => m.usage_decay = parse(key, value)?,
            "stft_windows" => m.stft_windows = list(key, value)?,
            "diversity_grad" => m.diversity_grad = parse(key, value)?,
            "input_size" => m.patch.input_size = parse(key, value)?,
            "patch_scales" => m.patch.scales = list(key, value)?,
            "embed_dim" => m.patch.embed_dim = parse(key, value)?,
            "window" => m.patch.window = parse(key, value)?,
            "heads" => m.patch.heads = parse(key, value)?,
            "layers" => m.patch.layers = parse(key, value)?,
            _ => return Err(MoeError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (blank lines and `#` comments ignored) on top of
    /// the desk preset. A `preset` key resets everything before it.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MoeError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path).map_err(|e| MoeError::io(path, e))?)
    }

    /// Renders every key; `from_kv(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let m = &self.model;
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("base_lr", format!("{:e}", self.base_lr)),
            ("lr_ramp", format!("{:?}", self.lr_ramp).to_lowercase()),
            ("lr_period", self.lr_period.to_string()),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("use_bias", self.use_bias.to_string()),
            ("use_warp", self.use_warp.to_string()),
            ("seed", self.seed.to_string()),
            ("codec_steps", self.codec_steps.to_string()),
            ("codec_lr", format!("{:e}", self.codec_lr)),
            ("scale_factor", m.codec.scale_factor.to_string()),
            ("codebook_size", m.codec.codebook_size.to_string()),
            ("code_dim", m.codec.code_dim.to_string()),
            ("codec_channels", m.codec.base_channels.to_string()),
            ("expert_steps", join(&m.steps)),
            ("expert_channels", m.expert_channels.to_string()),
            ("time_dim", m.time_dim.to_string()),
            ("gamma", m.gamma.to_string()),
            ("usage_decay", m.usage_decay.to_string()),
            ("stft_windows", join(&m.stft_windows)),
            ("diversity_grad", m.diversity_grad.to_string()),
            ("input_size", m.patch.input_size.to_string()),
            ("patch_scales", join(&m.patch.scales)),
            ("embed_dim", m.patch.embed_dim.to_string()),
            ("window", m.patch.window.to_string()),
            ("heads", m.patch.heads.to_string()),
            ("layers", m.patch.layers.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Conditioning image of a pair: the low-resolution slice upsampled to the
/// high-resolution grid. The same image is the bicubic baseline.
pub fn upsampled(pair: &SlicePair) -> Result<Tensor> {
    let s = pair.hr.shape();
    resize_bicubic(&pair.lr, s[1], s[2])
}

/// Bias and displacement fields handed to the codec for a pair.
pub fn codec_fields(pair: &SlicePair, use_bias: bool, use_warp: bool) -> (Tensor, Tensor) {
    let b = if use_bias { pair.bias.clone() } else { Tensor::ones(pair.bias.shape().to_vec()) };
    let g = if use_warp { pair.warp.clone() } else { Tensor::zeros(pair.warp.shape().to_vec()) };
    (b, g)
}

/// Stacked conditioning images `[N, 1, S, S]`.
pub fn conditioning_batch(pairs: &[SlicePair]) -> Result<Tensor> {
    let ups: Vec<Tensor> = pairs.iter().map(upsampled).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = ups.iter().collect();
    let first = pairs.first().ok_or_else(|| MoeError::Contract("empty pair list".into()))?;
    let s = first.hr.shape();
    Ok(Tensor::concat(&refs, 0)?.reshape([pairs.len(), 1, s[1], s[2]])?)
}

/// Clean training latents `[N, C, h, w]` of the high-resolution slices.
pub fn clean_latents(codec: &VqCodec, pairs: &[SlicePair], use_bias: bool, use_warp: bool) -> Result<Tensor> {
    let inputs: Vec<Tensor> = pairs
        .iter()
        .map(|p| {
            let (b, g) = codec_fields(p, use_bias, use_warp);
            VqCodec::stack_input(&p.hr, &b, &g)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let s = pairs[0].hr.shape();
    codec.encode_batch(&Tensor::concat(&refs, 0)?.reshape([pairs.len(), 4, s[1], s[2]])?)
}

/// Chain-start latents of the upsampled inputs (unit bias, zero displacement).
pub fn anchor_latents(codec: &VqCodec, cond: &Tensor) -> Result<Tensor> {
    let sh = cond.shape();
    let (n, h, w) = (sh[0], sh[2], sh[3]);
    let mut input = Tensor::zeros([n, 4, h, w]);
    let hw = h * w;
    for i in 0..n {
        let base = i * 4 * hw;
        input.data_mut()[base..base + hw].copy_from_slice(&cond.data()[i * hw..(i + 1) * hw]);
        input.data_mut()[base + hw..base + 2 * hw].fill(1.0);
    }
    codec.encode_batch(&input)
}

/// Mutable state of a run; everything a checkpoint restores.
pub struct TrainState {
    pub config: TrainConfig,
    pub codec: VqCodec,
    pub model: MoeModel,
    pub opt: AdamW,
    pub usage: UsageState,
    pub tracker: VarianceTracker,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state around an already trained codec.
    pub fn new(config: TrainConfig, codec: VqCodec) -> Result<Self> {
        config.validate()?;
        if codec.config != config.model.codec {
            return Err(MoeError::Config(format!(
                "codec {:?} does not match the configured {:?}",
                codec.config, config.model.codec
            )));
        }
        let model = MoeModel::new(config.model.clone())?;
        let opt = AdamW::new(&model.store, AdamWConfig { weight_decay: config.weight_decay, ..Default::default() });
        let mut usage = UsageState::new(EXPERTS);
        usage.decay = config.model.usage_decay;
        usage.gamma = config.model.gamma;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Self { config, codec, model, opt, usage, tracker: VarianceTracker::default(), epoch: 0, step: 0, rng })
    }
}

/// Trains the codec alone, as the first stage of the pipeline.
pub fn train_codec_stage(config: &TrainConfig, pairs: &[SlicePair]) -> Result<VqCodec> {
    let mut codec = VqCodec::new(config.model.codec.clone(), config.seed);
    crate::codec::train_codec(&mut codec, pairs, &config.codec_train())?;
    crate::codec::standardize_latents(&mut codec, pairs)?;
    Ok(codec)
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub const LOG: &'static str = "train_log.csv";
    pub const FINAL: &'static str = "checkpoint.bin";

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch:05}.bin"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(Self::FINAL)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(Self::LOG)
    }
}

/// Runs the remaining epochs of `state` on `pairs`. With a run directory, logs
/// every step to CSV and writes periodic and final checkpoints.
pub fn train(state: &mut TrainState, pairs: &[SlicePair], out: Option<&RunDir>) -> Result<Vec<LossReport>> {
    if pairs.is_empty() {
        return Err(MoeError::Contract("training needs at least one pair".into()));
    }
    let cfg = state.config.clone();
    let cond_all = conditioning_batch(pairs)?;
    let z0_all = clean_latents(&state.codec, pairs, cfg.use_bias, cfg.use_warp)?;
    let warmup_epochs = cfg.warmup_epochs();
    let mut log = match out {
        Some(run) => {
            fs::create_dir_all(&run.dir).map_err(|e| MoeError::io(&run.dir, e))?;
            let path = run.log();
            let append = state.step > 0 && path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(&path)
                .map_err(|e| MoeError::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if !append {
                writeln!(w, "{}", LossReport::csv_header(EXPERTS)).map_err(|e| MoeError::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut last_checkpoint = String::from("none");
    let mut reports = Vec::new();
    let n = pairs.len();
    let [c, h, w] = cfg.model.latent_shape();

    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let warmup = state.epoch < warmup_epochs;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let t: Vec<Vec<usize>> = state
                .model
                .schedules
                .iter()
                .map(|s| (0..b).map(|_| state.rng.random_range(1..=s.steps())).collect())
                .collect();
            let eps: Vec<Tensor> = (0..EXPERTS).map(|_| standard_normal(&[b, c, h, w], &mut state.rng)).collect();
            let input = StepInput { cond: gather(&cond_all, batch)?, z0: gather(&z0_all, batch)?, t, eps, warmup, frozen: None };
            let lr = cfg.lr_at(state.step);

            let tape = Tape::new();
            let bd = Binder::new(&tape, &state.model.store, true);
            let out = state.model.training_forward(&bd, &input, &state.usage, &mut state.tracker)?;
            let mut report = out.report;
            report.step = state.step;
            report.epoch = state.epoch;
            report.lr = lr;
            if !report.is_finite() || !out.total.item()?.is_finite() {
                if let Some((w, path)) = log.as_mut().map(|(w, p)| (w, &*p)) {
                    w.flush().map_err(|e| MoeError::io(path, e))?;
                }
                return Err(MoeError::NonFiniteLoss { step: state.step, last_checkpoint });
            }
            tape.backward(out.total)?;
            let grads = bd.grads();
            drop(bd);
            state.opt.update(&mut state.model.store, &grads, lr)?;
            if !warmup {
                state.usage.update(&out.g)?;
            }
            if let Some((w, path)) = log.as_mut().map(|(w, p)| (w, &*p)) {
                writeln!(w, "{}", report.csv_row()).map_err(|e| MoeError::io(path, e))?;
            }
            reports.push(report);
            state.step += 1;
        }
        state.epoch += 1;
        if let Some(run) = out {
            let periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
            if periodic || state.epoch == cfg.epochs {
                if let Some((w, path)) = log.as_mut().map(|(w, p)| (w, &*p)) {
                    w.flush().map_err(|e| MoeError::io(path, e))?;
                }
                let path = if state.epoch == cfg.epochs { run.final_checkpoint() } else { run.checkpoint(state.epoch) };
                crate::checkpoint::save(state, &path)?;
                last_checkpoint = path.display().to_string();
            }
        }
    }
    if let Some((w, path)) = log.as_mut().map(|(w, p)| (w, &*p)) {
        w.flush().map_err(|e| MoeError::io(path, e))?;
    }
    Ok(reports)
}
