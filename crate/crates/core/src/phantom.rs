//! Procedural brain-like phantoms and their degraded low-resolution partners.
//!
//! A phantom holds three region kinds: large smooth blobs, a folded ribbon
//! around the brain outline, and hard-edged inclusions giving sharp
//! two-intensity interfaces.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use moediff_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::imaging;
use crate::records;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub hr_size: usize,
    pub lr_size: usize,
    pub n_ellipses: usize,
    pub cortex_ribbon: bool,
    pub noise_sigma: f64,
    /// Length scale of the bias polynomial; larger is smoother.
    pub bias_smoothness: f64,
    /// Peak deviation of the bias field from one, before mean normalization.
    pub bias_amplitude: f64,
    /// Peak displacement of the warp field in pixels.
    pub warp_amplitude: f64,
    /// Gaussian anti-alias blur before downsampling.
    pub blur: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            hr_size: 64,
            lr_size: 32,
            n_ellipses: 4,
            cortex_ribbon: true,
            noise_sigma: 0.02,
            bias_smoothness: 1.0,
            bias_amplitude: 0.2,
            warp_amplitude: 1.0,
            blur: true,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hr_size < 8 || self.lr_size < 8 {
            return Err(MoeError::Config(format!(
                "hr_size and lr_size must be >= 8 (got {} and {})",
                self.hr_size, self.lr_size
            )));
        }
        let amps = [self.noise_sigma, self.bias_amplitude, self.warp_amplitude];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(MoeError::Config("amplitudes must be finite and >= 0".into()));
        }
        if self.bias_amplitude >= 1.0 {
            return Err(MoeError::Config("bias_amplitude must be < 1 to keep the field positive".into()));
        }
        if !(self.bias_smoothness > 0.0 && self.bias_smoothness.is_finite()) {
            return Err(MoeError::Config("bias_smoothness must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub hr: Tensor,
    pub lr: Tensor,
    pub bias: Tensor,
    pub warp: Tensor,
    pub seed: u64,
}

impl SlicePair {
    /// Builds a pair at storage (`f32`) precision so that disk round trips are exact.
    pub fn new(hr: &Tensor, lr: &Tensor, bias: &Tensor, warp: &Tensor, seed: u64) -> Self {
        Self {
            hr: records::round_f32(hr),
            lr: records::round_f32(lr),
            bias: records::round_f32(bias),
            warp: records::round_f32(warp),
            seed,
        }
    }

    pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Self> {
        let hr = generate_hr(seed, spec)?;
        let (lr, bias, warp) = degrade(&hr, spec, seed)?;
        Ok(Self::new(&hr, &lr, &bias, &warp, seed))
    }
}

const BACKGROUND: f64 = 0.0;
const CSF: f64 = 0.2;
const GREY: f64 = 0.5;
const WHITE: f64 = 0.8;

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    level: f64,
    ripple: (f64, f64, f64),
}

impl Ellipse {
    /// Normalized radius: < 1 inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    fn value(&self, y: f64, x: f64) -> f64 {
        let (a, fy, fx) = self.ripple;
        self.level + a * (fy * y).sin() * (fx * x).cos()
    }
}

/// High-resolution phantom in `[0, 1]`, `[1, S, S]`.
pub fn generate_hr(seed: u64, spec: &PhantomSpec) -> Result<Tensor> {
    spec.validate()?;
    let s = spec.hr_size;
    let mut img = Tensor::full([1, s, s], BACKGROUND);
    if spec.n_ellipses == 0 && !spec.cortex_ribbon {
        return Ok(img);
    }
    let mut rng = stream(seed, 1);
    let centre = 0.5 + rng.random_range(-0.03..0.03);
    let brain_r = (0.36 + rng.random_range(-0.03..0.03), 0.30 + rng.random_range(-0.03..0.03));
    let folds = rng.random_range(5..9) as f64;
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let fold_depth = rng.random_range(0.06..0.1);
    let thickness = rng.random_range(0.07..0.1);

    let blobs: Vec<Ellipse> = (0..spec.n_ellipses)
        .map(|i| {
            // the first blob is the large smooth white-matter core, the rest are
            // small hard-edged inclusions of alternating intensity
            let (scale, level) = if i == 0 {
                (rng.random_range(0.55..0.7), WHITE)
            } else {
                (rng.random_range(0.12..0.25), if i % 2 == 1 { GREY } else { WHITE + 0.1 })
            };
            let spread = if i == 0 { 0.04 } else { 0.16 };
            Ellipse {
                cy: centre + rng.random_range(-spread..spread),
                cx: centre + rng.random_range(-spread..spread),
                ry: brain_r.0 * scale * rng.random_range(0.8..1.2),
                rx: brain_r.1 * scale * rng.random_range(0.8..1.2),
                angle: rng.random_range(0.0..PI),
                level,
                ripple: if i == 0 {
                    (0.03, rng.random_range(4.0..8.0), rng.random_range(4.0..8.0))
                } else {
                    (0.0, 0.0, 0.0)
                },
            }
        })
        .collect();

    let inv = 1.0 / s as f64;
    for r in 0..s {
        for c in 0..s {
            let (y, x) = ((r as f64 + 0.5) * inv, (c as f64 + 0.5) * inv);
            let (dy, dx) = (y - centre, x - centre);
            let theta = dy.atan2(dx);
            // folded outline of the brain: ellipse radius modulated by gyri
            let outline = 1.0 + fold_depth * (folds * theta + phase).sin();
            let rho = ((dy / brain_r.0).powi(2) + (dx / brain_r.1).powi(2)).sqrt() / outline;
            let mut v = BACKGROUND;
            if rho < 1.0 {
                v = CSF;
                if spec.cortex_ribbon && rho > 1.0 - thickness / brain_r.0.min(brain_r.1) {
                    v = GREY;
                }
            }
            for (i, e) in blobs.iter().enumerate() {
                if e.rho(y, x) < 1.0 && (i > 0 || rho < 1.0 || !spec.cortex_ribbon) {
                    v = e.value(y, x);
                }
            }
            img.data_mut()[r * s + c] = v.clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Positive multiplicative field with mean exactly one: a random cubic
/// polynomial over `[-1, 1]²`, coordinates divided by the smoothness scale.
pub fn bias_field(spec: &PhantomSpec, seed: u64) -> Tensor {
    let s = spec.hr_size;
    if spec.bias_amplitude == 0.0 {
        return Tensor::ones([1, s, s]);
    }
    let mut rng = stream(seed, 2);
    let mut terms = Vec::new();
    for i in 0..=3i32 {
        for j in 0..=(3 - i) {
            if i + j > 0 {
                let c: f64 = StandardNormal.sample(&mut rng);
                terms.push((i, j, c / (1..=(i + j)).product::<i32>() as f64));
            }
        }
    }
    let coord = |k: usize| ((k as f64 + 0.5) / s as f64 * 2.0 - 1.0) / spec.bias_smoothness;
    let poly = Tensor::from_fn([1, s, s], |k| {
        let (u, v) = (coord(k % s), coord(k / s));
        terms.iter().map(|&(i, j, c)| c * u.powi(i) * v.powi(j)).sum()
    });
    let peak = poly.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let field = poly.map(|p| 1.0 + spec.bias_amplitude * p / peak);
    let mean = field.mean();
    field.map(|v| v / mean)
}

/// Smooth displacement field `[2, S, S]` bounded by `warp_amplitude` pixels.
pub fn warp_field(spec: &PhantomSpec, seed: u64) -> Tensor {
    let s = spec.hr_size;
    if spec.warp_amplitude == 0.0 {
        return Tensor::zeros([2, s, s]);
    }
    let mut rng = stream(seed, 3);
    let mut out = Tensor::zeros([2, s, s]);
    for comp in 0..2 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let plane = &mut out.data_mut()[comp * s * s..(comp + 1) * s * s];
        for (k, p) in plane.iter_mut().enumerate() {
            let (u, v) = ((k % s) as f64 / s as f64, (k / s) as f64 / s as f64);
            *p = waves.iter().map(|&(a, fu, fv, ph)| a * (PI * (fu * u + fv * v) + ph).sin()).sum();
        }
        let peak = plane.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        plane.iter_mut().for_each(|p| *p *= spec.warp_amplitude / peak);
    }
    out
}

/// `lr = downsample(blur(warp(hr · bias))) + noise`, clamped to `[0, 1]`.
pub fn degrade(hr: &Tensor, spec: &PhantomSpec, seed: u64) -> Result<(Tensor, Tensor, Tensor)> {
    spec.validate()?;
    let s = spec.hr_size;
    if hr.shape() != [1, s, s] {
        return Err(MoeError::Contract(format!("hr must be [1,{s},{s}], got {:?}", hr.shape())));
    }
    let bias = bias_field(spec, seed);
    let disp = warp_field(spec, seed);
    let mut img = imaging::warp(&hr.mul(&bias)?, &disp)?;
    if spec.blur {
        img = imaging::gaussian_blur(&img, s as f64 / spec.lr_size as f64 * 0.5)?;
    }
    let mut lr = imaging::resize_area(&img, spec.lr_size, spec.lr_size)?;
    if spec.noise_sigma > 0.0 {
        let mut rng = stream(seed, 4);
        for v in lr.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_sigma * n;
        }
    }
    Ok((lr.map(|v| v.clamp(0.0, 1.0)), bias, disp))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_VERSION: u32 = records::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    /// 8:1:1 split of `n` items; remainders go to training.
    pub fn ratio_8_1_1(n: usize) -> Self {
        let val = n / 10;
        let test = n / 10;
        Self { train: n - val - test, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: PhantomSpec,
    pub seeds: Vec<u64>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn new(spec: PhantomSpec, seeds: Vec<u64>, splits: Splits) -> Result<Self> {
        let m = Self { format_version: DATASET_VERSION, spec, seeds, splits };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.splits.total() != self.seeds.len() {
            return Err(MoeError::Config(format!(
                "split sizes sum to {} but there are {} seeds",
                self.splits.total(),
                self.seeds.len()
            )));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(MoeError::Config("dataset seeds must be unique".into()));
        }
        Ok(())
    }

    pub fn train_seeds(&self) -> &[u64] {
        &self.seeds[..self.splits.train]
    }

    pub fn val_seeds(&self) -> &[u64] {
        &self.seeds[self.splits.train..self.splits.train + self.splits.val]
    }

    pub fn test_seeds(&self) -> &[u64] {
        &self.seeds[self.splits.train + self.splits.val..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<SlicePair>,
}

impl Dataset {
    /// Generates every pair listed by the manifest.
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        let pairs = manifest
            .seeds
            .iter()
            .map(|&seed| SlicePair::generate(&manifest.spec, seed))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, pairs })
    }

    pub fn split(&self, which: Split) -> &[SlicePair] {
        let s = &self.manifest.splits;
        match which {
            Split::Train => &self.pairs[..s.train],
            Split::Val => &self.pairs[s.train..s.train + s.val],
            Split::Test => &self.pairs[s.train + s.val..],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(MoeError::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn pair_file(seed: u64) -> String {
    format!("pair_{seed}.bin")
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| MoeError::io(dir, e))?;
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| MoeError::Config(format!("manifest serialization: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| MoeError::io(&mpath, e))?;
    for p in &dataset.pairs {
        records::write(
            &dir.join(pair_file(p.seed)),
            &[("hr", &p.hr), ("lr", &p.lr), ("bias", &p.bias), ("warp", &p.warp)],
        )?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| MoeError::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| MoeError::format(&mpath, e.to_string()))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(MoeError::format(
            &mpath,
            format!("format version {}, expected {DATASET_VERSION}", manifest.format_version),
        ));
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_pair(path: &Path, seed: u64) -> Result<SlicePair> {
    let mut recs = records::read(path)?;
    Ok(SlicePair {
        hr: records::take(&mut recs, "hr", path)?,
        lr: records::take(&mut recs, "lr", path)?,
        bias: records::take(&mut recs, "bias", path)?,
        warp: records::take(&mut recs, "warp", path)?,
        seed,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let pairs = manifest
        .seeds
        .iter()
        .map(|&seed| read_pair(&dir.join(pair_file(seed)), seed))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, pairs })
}
