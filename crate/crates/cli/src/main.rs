//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use moediff_core::checkpoint;
use moediff_core::imaging::{read_pgm, write_pgm};
use moediff_core::phantom::{read_dataset, write_dataset, Dataset, DatasetManifest, PhantomSpec, SlicePair, Split, Splits};
use moediff_core::pipeline::{difference_maps, evaluate, report_cost, REGIONS};
use moediff_core::records;
use moediff_core::sampler::{ChainStart, Mixing, SampleMode, SampleOptions};
use moediff_core::training::{train, train_codec_stage, RunDir, TrainConfig, TrainState};
use moediff_core::MoeError;

#[derive(Parser)]
#[command(name = "moediff", version, about = "Mixture-of-experts latent diffusion for slice super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset (8:1:1 train/val/test).
    GenData {
        /// Phantom spec as JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the latent codec on the training split.
    TrainCodec {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Codec checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder, gate and experts over a frozen codec.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codec checkpoint from `train-codec`.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Continue from a training checkpoint instead.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve a PGM slice or a dataset split.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// A low-resolution PGM file, or a split name (train | val | test) with --data.
        #[arg(long)]
        input: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Score a split: PSNR, SSIM, RMSE and gate weights.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON summary path; gate weights go to the same stem with `_gates.csv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Per-expert absolute difference maps for one example.
    Diffmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Example id (the pair's seed).
        #[arg(long)]
        example: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and multiply-accumulate report.
    Cost {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        topk: usize,
    },
}

#[derive(Args)]
struct Sampling {
    /// full | async
    #[arg(long, default_value = "full")]
    mode: String,
    /// Experts kept in async mode.
    #[arg(long, default_value_t = 1)]
    topk: usize,
    /// final | per-step
    #[arg(long, default_value = "final")]
    mixing: String,
    /// lowres | noise
    #[arg(long, default_value = "lowres")]
    start: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_mode(mode: &str, topk: usize) -> Result<SampleMode> {
    match mode {
        "full" => Ok(SampleMode::Full),
        "async" => Ok(SampleMode::Async(topk)),
        _ => bail!("unknown mode {mode:?} (full | async)"),
    }
}

impl Sampling {
    fn options(&self) -> Result<SampleOptions> {
        Ok(SampleOptions {
            mode: parse_mode(&self.mode, self.topk)?,
            mixing: self.mixing.parse::<Mixing>()?,
            start: self.start.parse::<ChainStart>()?,
            seed: self.seed,
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    })
}

fn split_of<'a>(data: &'a Dataset, name: &str) -> Result<&'a [SlicePair]> {
    Ok(data.split(name.parse::<Split>()?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, n, seed } => {
            let spec: PhantomSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => PhantomSpec::default(),
            };
            spec.validate()?;
            let seeds: Vec<u64> = (seed..seed + n as u64).collect();
            let manifest = DatasetManifest::new(spec, seeds, Splits::ratio_8_1_1(n))?;
            write_dataset(&Dataset::generate(manifest)?, &out)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::TrainCodec { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = read_dataset(&data)?;
            let mut codec = train_codec_stage(&cfg, data.split(Split::Train))?;
            checkpoint::save_codec(&mut codec, &out)?;
            println!("codec checkpoint {}", out.display());
        }
        Command::Train { config, data, out, codec, resume } => {
            let data = read_dataset(&data)?;
            let mut state = match (resume, codec) {
                (Some(r), _) => checkpoint::load(&r)?,
                (None, Some(c)) => {
                    if !c.exists() {
                        return Err(MoeError::Config(format!("codec checkpoint {} not found", c.display())).into());
                    }
                    TrainState::new(load_config(config.as_deref())?, checkpoint::load_codec(&c)?)?
                }
                (None, None) => {
                    return Err(MoeError::Config("training needs --codec (run train-codec first) or --resume".into()).into())
                }
            };
            let run_dir = RunDir { dir: out };
            let reports = train(&mut state, data.split(Split::Train), Some(&run_dir))?;
            if let Some(last) = reports.last() {
                println!("step {} total {:.6} expert {:.6} gating {:.6}", last.step, last.total, last.expert_loss, last.gating_loss);
            }
            println!("checkpoint {}", run_dir.final_checkpoint().display());
        }
        Command::Infer { ckpt, input, data, out, sampling } => {
            let state = checkpoint::load(&ckpt)?;
            let opts = sampling.options()?;
            let (ids, lr): (Vec<String>, Vec<_>) = if Path::new(&input).extension().is_some_and(|e| e == "pgm") {
                let y = read_pgm(Path::new(&input))?;
                let stem = Path::new(&input).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (vec![stem], vec![y])
            } else {
                let dir = data.context("a split input needs --data")?;
                let data = read_dataset(&dir)?;
                split_of(&data, &input)?.iter().map(|p| (p.seed.to_string(), p.lr.clone())).unzip()
            };
            let rec = state.reconstruct(&lr, &opts)?;
            fs::create_dir_all(&out)?;
            let mut gates = String::from("example_id,G1,G2,G3\n");
            for (i, id) in ids.iter().enumerate() {
                write_pgm(&out.join(format!("recon_{id}.pgm")), &rec.images[i])?;
                records::write(&out.join(format!("recon_{id}.bin")), &[("image", &rec.images[i])])?;
                let g = &rec.sample.g.data()[i * 3..(i + 1) * 3];
                gates.push_str(&format!("{id},{:.9},{:.9},{:.9}\n", g[0], g[1], g[2]));
            }
            fs::write(out.join("gates.csv"), gates)?;
            println!("wrote {} reconstructions to {}", ids.len(), out.display());
        }
        Command::Eval { ckpt, data, split, out, sampling } => {
            let state = checkpoint::load(&ckpt)?;
            let data = read_dataset(&data)?;
            let (report, _) = evaluate(&state, split_of(&data, &split)?, &sampling.options()?)?;
            write_text(&out, &serde_json::to_string_pretty(&report)?)?;
            let gates = out.with_file_name(format!(
                "{}_gates.csv",
                out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into())
            ));
            fs::write(&gates, report.gates_csv())?;
            println!(
                "PSNR {:.3} dB  SSIM {:.4}  RMSE {:.5}  (bicubic PSNR {:.3} dB)",
                report.mean.psnr, report.mean.ssim, report.mean.rmse, report.baseline_mean.psnr
            );
        }
        Command::Diffmap { ckpt, data, example, out, seed } => {
            let state = checkpoint::load(&ckpt)?;
            let data = read_dataset(&data)?;
            let pair = data
                .pairs
                .iter()
                .find(|p| p.seed == example)
                .with_context(|| format!("no example with id {example}"))?;
            let maps = difference_maps(&state, pair, seed)?;
            fs::create_dir_all(&out)?;
            let mut summary = String::from("expert,gate,energy");
            for r in REGIONS {
                summary.push_str(&format!(",{r}"));
            }
            summary.push('\n');
            for (i, m) in maps.maps.iter().enumerate() {
                write_pgm(&out.join(format!("diff_{example}_expert{}.pgm", i + 1)), m)?;
                summary.push_str(&format!("{},{:.9},{:.9}", i + 1, maps.gates[i], maps.energy[i]));
                for e in maps.region_energy[i] {
                    summary.push_str(&format!(",{e:.9}"));
                }
                summary.push('\n');
            }
            fs::write(out.join(format!("diff_{example}.csv")), &summary)?;
            print!("{summary}");
        }
        Command::Cost { ckpt, mode, topk } => {
            let state = checkpoint::load(&ckpt)?;
            let size = state.config.model.patch.input_size;
            let spec = PhantomSpec { hr_size: size, lr_size: size / 2, ..PhantomSpec::default() };
            let probe = SlicePair::generate(&spec, 0)?;
            let report = report_cost(&state, parse_mode(&mode, topk)?, &probe.lr)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
