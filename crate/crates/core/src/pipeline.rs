//! Inference, evaluation, per-expert difference maps and cost accounting on a
//! trained state.

use std::fmt::Write as _;

use moediff_tensor::{Binder, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::LatentCode;
use crate::error::{MoeError, Result};
use crate::imaging::resize_bicubic;
use crate::metrics::QualityReport;
use crate::model::EXPERTS;
use crate::phantom::SlicePair;
use crate::sampler::{SampleMode, SampleOptions, SampleOutput};
use crate::training::{anchor_latents, TrainState};

/// Decoded outputs of one inference call.
pub struct Reconstruction {
    /// `[1, S, S]` per example, in `[0, 1]`.
    pub images: Vec<Tensor>,
    /// Bicubic upsampling of each input.
    pub baselines: Vec<Tensor>,
    pub sample: SampleOutput,
}

fn split_rows(t: &Tensor) -> Result<Vec<Tensor>> {
    let n = t.shape()[0];
    let inner = t.shape()[1..].to_vec();
    let per = t.numel() / n.max(1);
    (0..n).map(|i| Ok(Tensor::new(inner.clone(), t.data()[i * per..(i + 1) * per].to_vec())?)).collect()
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| MoeError::Contract("nothing to stack".into()))?;
    let refs: Vec<&Tensor> = items.iter().collect();
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::concat(&refs, 0)?.reshape(shape)?)
}

impl TrainState {
    fn decode_batch(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let code = LatentCode { z: z.clone(), scale_factor: self.config.model.codec.scale_factor };
        split_rows(&self.codec.decode(&code)?)
    }

    /// Super-resolves low-resolution slices `[1, s, s]`; each side must divide
    /// the model's input size.
    pub fn reconstruct(&self, lr: &[Tensor], opts: &SampleOptions) -> Result<Reconstruction> {
        if lr.is_empty() {
            return Err(MoeError::Contract("no input slices".into()));
        }
        let size = self.config.model.patch.input_size;
        let mut baselines = Vec::with_capacity(lr.len());
        for y in lr {
            let s = y.shape();
            if s.len() != 3 || s[0] != 1 || s[1] != s[2] || s[1] > size || size % s[1] != 0 {
                return Err(MoeError::Config(format!(
                    "input slice {s:?} does not match the model resolution {size}x{size}"
                )));
            }
            baselines.push(resize_bicubic(y, size, size)?);
        }
        let cond = stack(&baselines)?;
        let anchor = anchor_latents(&self.codec, &cond)?;
        let sample = self.model.sample(&cond, Some(&anchor), &self.usage, opts)?;
        let images = self.decode_batch(&sample.z0)?;
        Ok(Reconstruction { images, baselines, sample })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub example_id: u64,
    pub quality: QualityReport,
    /// Same metrics for the bicubic upsampling of the input.
    pub baseline: QualityReport,
    pub gates: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub examples: Vec<ExampleMetrics>,
    pub mean: QualityReport,
    pub baseline_mean: QualityReport,
    pub gate_mean: Vec<f64>,
    pub gate_std: Vec<f64>,
}

impl MetricsReport {
    /// `example_id,G1,G2,G3` rows.
    pub fn gates_csv(&self) -> String {
        let mut s = String::from("example_id");
        for i in 1..=EXPERTS {
            let _ = write!(s, ",G{i}");
        }
        s.push('\n');
        for e in &self.examples {
            let _ = write!(s, "{}", e.example_id);
            for g in &e.gates {
                let _ = write!(s, ",{g:.9}");
            }
            s.push('\n');
        }
        s
    }
}

/// Reconstructs every pair and scores it against its high-resolution slice.
pub fn evaluate(state: &TrainState, pairs: &[SlicePair], opts: &SampleOptions) -> Result<(MetricsReport, Reconstruction)> {
    if pairs.is_empty() {
        return Err(MoeError::Contract("evaluation split is empty".into()));
    }
    let lr: Vec<Tensor> = pairs.iter().map(|p| p.lr.clone()).collect();
    let rec = state.reconstruct(&lr, opts)?;
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        examples.push(ExampleMetrics {
            example_id: p.seed,
            quality: QualityReport::measure(&rec.images[i], &p.hr)?,
            baseline: QualityReport::measure(&rec.baselines[i], &p.hr)?,
            gates: rec.sample.g.data()[i * EXPERTS..(i + 1) * EXPERTS].to_vec(),
            selected: rec.sample.selected[i].clone(),
        });
    }
    let n = examples.len() as f64;
    let gate_mean: Vec<f64> = (0..EXPERTS).map(|k| examples.iter().map(|e| e.gates[k]).sum::<f64>() / n).collect();
    let gate_std = (0..EXPERTS)
        .map(|k| (examples.iter().map(|e| (e.gates[k] - gate_mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let report = MetricsReport {
        mode: opts.mode.to_string(),
        mean: QualityReport::mean(&examples.iter().map(|e| e.quality.clone()).collect::<Vec<_>>()),
        baseline_mean: QualityReport::mean(&examples.iter().map(|e| e.baseline.clone()).collect::<Vec<_>>()),
        examples,
        gate_mean,
        gate_std,
    };
    Ok((report, rec))
}

/// Tissue regions used to compare expert errors.
pub const REGIONS: [&str; 3] = ["smooth", "ribbon", "interface"];

/// Boolean masks (as 0/1 tensors) of homogeneous white matter, the grey
/// ribbon, and grey-white boundaries of a phantom slice `[1, S, S]`.
pub fn region_masks(hr: &Tensor) -> Result<[Tensor; 3]> {
    let s = hr.shape();
    if s.len() != 3 {
        return Err(MoeError::Contract(format!("region masks need [1,S,S], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let at = |y: isize, x: isize| hr.data()[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let white = |v: f64| v > 0.65;
    let grey = |v: f64| (0.35..=0.65).contains(&v);
    let mut masks = [Tensor::zeros([1, h, w]), Tensor::zeros([1, h, w]), Tensor::zeros([1, h, w])];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hood = [0.0; 9];
            for (k, v) in hood.iter_mut().enumerate() {
                *v = at(y + k as isize / 3 - 1, x + k as isize % 3 - 1);
            }
            let i = y as usize * w + x as usize;
            if hood.iter().all(|&v| white(v)) {
                masks[0].data_mut()[i] = 1.0;
            } else if hood.iter().all(|&v| grey(v)) {
                masks[1].data_mut()[i] = 1.0;
            } else if hood.iter().any(|&v| white(v)) && hood.iter().any(|&v| grey(v)) {
                masks[2].data_mut()[i] = 1.0;
            }
        }
    }
    Ok(masks)
}

/// Per-expert solo reconstructions of one slice and their absolute error maps.
#[derive(Clone, Debug)]
pub struct DiffMaps {
    pub example_id: u64,
    pub gates: Vec<f64>,
    /// `|x̂_i − hr|` per expert, `[1, S, S]` in `[0, 1]`.
    pub maps: Vec<Tensor>,
    /// Mean of each map.
    pub energy: Vec<f64>,
    /// Mean of each map over each of [`REGIONS`] (NaN for an empty region).
    pub region_energy: Vec<[f64; 3]>,
}

impl DiffMaps {
    /// Expert order (best first) in each region.
    pub fn rankings(&self) -> [Vec<usize>; 3] {
        std::array::from_fn(|r| {
            let mut order: Vec<usize> = (0..self.maps.len()).collect();
            order.sort_by(|&a, &b| self.region_energy[a][r].total_cmp(&self.region_energy[b][r]));
            order
        })
    }

    /// Whether the best expert is not the same in all populated regions.
    pub fn rankings_differ(&self) -> bool {
        let ranks = self.rankings();
        let populated: Vec<usize> =
            (0..3).filter(|&r| self.region_energy.iter().all(|e| e[r].is_finite())).collect();
        populated.windows(2).any(|w| ranks[w[0]] != ranks[w[1]])
    }
}

pub fn difference_maps(state: &TrainState, pair: &SlicePair, seed: u64) -> Result<DiffMaps> {
    let opts = SampleOptions { mode: SampleMode::Full, seed, ..Default::default() };
    let rec = state.reconstruct(std::slice::from_ref(&pair.lr), &opts)?;
    let masks = region_masks(&pair.hr)?;
    let mut maps = Vec::with_capacity(EXPERTS);
    let mut energy = Vec::with_capacity(EXPERTS);
    let mut region_energy = Vec::with_capacity(EXPERTS);
    for est in &rec.sample.estimates {
        let est = est.as_ref().ok_or_else(|| MoeError::Contract("full mode skipped an expert".into()))?;
        let img = state.decode_batch(est)?.remove(0);
        let map = img.zip_map(&pair.hr, |a, b| (a - b).abs())?;
        energy.push(map.mean());
        region_energy.push(std::array::from_fn(|r| {
            let m = &masks[r];
            let count = m.sum();
            if count == 0.0 {
                f64::NAN
            } else {
                map.data().iter().zip(m.data()).map(|(v, k)| v * k).sum::<f64>() / count
            }
        }));
        maps.push(map);
    }
    Ok(DiffMaps { example_id: pair.seed, gates: rec.sample.g.data()[..EXPERTS].to_vec(), maps, energy, region_energy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub module: String,
    pub params: usize,
    /// Multiply-accumulates of one forward evaluation on one slice.
    pub macs_per_eval: u64,
    /// Evaluations per reverse chain (1 for shared modules).
    pub evals_per_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: String,
    pub rows: Vec<CostRow>,
    pub codec_params: usize,
    pub total_params: usize,
    /// Largest parameter count any slice can activate in this mode.
    pub active_params: usize,
    pub total_macs_per_sample: u64,
    pub active_macs_per_sample: u64,
    /// Parameters actually read while sampling a probe slice.
    pub touched_params: usize,
    /// Static count for the experts the probe slice selected.
    pub expected_touched: usize,
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>12} {:>16} {:>8}", "module", "params", "MACs/eval", "evals");
        for r in &self.rows {
            let _ = writeln!(s, "{:<20} {:>12} {:>16} {:>8}", r.module, r.params, r.macs_per_eval, r.evals_per_sample);
        }
        let _ = writeln!(s, "{:<20} {:>12}", "codec (frozen)", self.codec_params);
        let _ = writeln!(s, "mode                 {}", self.mode);
        let _ = writeln!(s, "total params         {}", self.total_params);
        let _ = writeln!(s, "active params        {}", self.active_params);
        let _ = writeln!(s, "active/total         {:.4}", self.active_params as f64 / self.total_params as f64);
        let _ = writeln!(s, "total MACs/sample    {}", self.total_macs_per_sample);
        let _ = writeln!(s, "active MACs/sample   {}", self.active_macs_per_sample);
        let _ = writeln!(s, "touched (probe)      {}", self.touched_params);
        let _ = writeln!(s, "expected (probe)     {}", self.expected_touched);
        s
    }
}

fn largest_sum<T: Copy + Ord + std::iter::Sum>(mut v: Vec<T>, k: usize) -> T {
    v.sort_unstable_by(|a, b| b.cmp(a));
    v.into_iter().take(k).sum()
}

/// Static parameter and multiply-accumulate accounting, cross-checked by
/// sampling one probe slice (the bicubic input of `probe`) with counters on.
pub fn report_cost(state: &TrainState, mode: SampleMode, probe: &Tensor) -> Result<CostReport> {
    let model = &state.model;
    let size = model.config.patch.input_size;
    let k = mode.top_k();
    let (shared_macs, expert_macs) = {
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &model.store, false);
        let y = tape.constant(Tensor::zeros([1, 1, size, size]));
        let z_c = model.cond.forward(&bd, y)?;
        let cond_macs = tape.macs();
        model.gate.forward(&bd, z_c, &state.usage)?;
        let gate_macs = tape.macs() - cond_macs;
        let grid = model.cond.to_finest_grid(z_c)?;
        let [c, h, w] = model.config.latent_shape();
        let mut per = Vec::with_capacity(EXPERTS);
        for e in &model.experts {
            let before = tape.macs();
            e.predict_eps(&bd, tape.constant(Tensor::zeros([1, c, h, w])), grid, &[1], &[1.0 / EXPERTS as f64])?;
            per.push(tape.macs() - before);
        }
        ((cond_macs, gate_macs), per)
    };
    let mut rows = vec![
        CostRow {
            module: "condition_encoder".into(),
            params: model.param_counts()[0].1,
            macs_per_eval: shared_macs.0,
            evals_per_sample: 1,
        },
        CostRow { module: "gate".into(), params: model.param_counts()[1].1, macs_per_eval: shared_macs.1, evals_per_sample: 1 },
    ];
    for (i, &m) in expert_macs.iter().enumerate() {
        rows.push(CostRow {
            module: format!("expert{}", i + 1),
            params: model.expert_params(i),
            macs_per_eval: m,
            evals_per_sample: model.schedules[i].steps(),
        });
    }
    let shared_params = model.shared_params();
    let shared_total = shared_macs.0 + shared_macs.1;
    let chain: Vec<u64> = (0..EXPERTS).map(|i| expert_macs[i] * model.schedules[i].steps() as u64).collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    let active_params = shared_params + largest_sum((0..EXPERTS).map(|i| model.expert_params(i)).collect(), k);

    let rec = state.reconstruct(std::slice::from_ref(probe), &SampleOptions { mode, ..Default::default() })?;
    let expected_touched = shared_params + rec.sample.selected[0].iter().map(|&i| model.expert_params(i)).sum::<usize>();
    Ok(CostReport {
        mode: mode.to_string(),
        rows,
        codec_params: state.codec.store.numel(),
        total_params,
        active_params,
        total_macs_per_sample: shared_total + chain.iter().sum::<u64>(),
        active_macs_per_sample: shared_total + largest_sum(chain, k),
        touched_params: rec.sample.touched_params,
        expected_touched,
    })
}
