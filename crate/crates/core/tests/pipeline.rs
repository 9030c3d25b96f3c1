//! End-to-end behaviour on a micro configuration: warm-up, logging,
//! checkpoints, sampling modes, difference maps and cost accounting.

use std::fs;
use std::sync::OnceLock;

use moediff_core::checkpoint;
use moediff_core::model::EXPERTS;
use moediff_core::phantom::{PhantomSpec, SlicePair};
use moediff_core::pipeline::{difference_maps, evaluate, report_cost};
use moediff_core::sampler::{top_k, ChainStart, Mixing, SampleMode, SampleOptions};
use moediff_core::training::{train, train_codec_stage, RunDir, TrainConfig, TrainState};
use moediff_core::losses::LossReport;
use moediff_core::MoeError;
use tempfile::TempDir;

struct Fixture {
    pairs: Vec<SlicePair>,
    config: TrainConfig,
    run: RunDir,
    reports: Vec<LossReport>,
    codec_path: std::path::PathBuf,
    _dir: TempDir,
}

fn config() -> TrainConfig {
    TrainConfig { epochs: 4, warmup_fraction: 0.5, checkpoint_every: 2, ..TrainConfig::micro() }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<SlicePair> = (0..8).map(|s| SlicePair::generate(&PhantomSpec::default(), s).unwrap()).collect();
        let config = config();
        let mut codec = train_codec_stage(&config, &pairs).unwrap();
        let codec_path = dir.path().join("codec.bin");
        checkpoint::save_codec(&mut codec, &codec_path).unwrap();
        let mut state = TrainState::new(config.clone(), codec).unwrap();
        let run = RunDir { dir: dir.path().join("run") };
        let reports = train(&mut state, &pairs, Some(&run)).unwrap();
        Fixture { pairs, config, run, reports, codec_path, _dir: dir }
    })
}

fn trained() -> TrainState {
    checkpoint::load(&fixture().run.final_checkpoint()).unwrap()
}

#[test]
fn warmup_steps_use_uniform_gates() {
    let f = fixture();
    let warm = f.config.warmup_epochs();
    assert_eq!(warm, 2);
    let mut seen = 0;
    for r in f.reports.iter().filter(|r| r.epoch < warm) {
        assert!(r.gates.iter().all(|&g| g == 1.0 / EXPERTS as f64), "step {}: {:?}", r.step, r.gates);
        assert_eq!(r.usage, vec![1.0 / 3.0; 3]);
        seen += 1;
    }
    assert_eq!(seen, 4);
    assert!(f.reports.iter().any(|r| r.epoch >= warm && r.gates.iter().any(|&g| g != 1.0 / 3.0)));
}

#[test]
fn training_log_has_a_finite_row_per_step() {
    let f = fixture();
    let text = fs::read_to_string(f.run.log()).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, LossReport::csv_header(EXPERTS).split(',').collect::<Vec<_>>());
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), f.reports.len());
    assert_eq!(rows.len(), 8);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse::<f64>().unwrap()).collect();
        assert_eq!(cols.len(), header.len());
        assert!(cols.iter().all(|v| v.is_finite()), "row {i}: {row}");
        assert_eq!(cols[0] as usize, i);
    }
    assert!(f.run.checkpoint(2).exists());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let f = fixture();
    let path = f.run.final_checkpoint();
    let bytes = fs::read(&path).unwrap();
    let mut state = checkpoint::load(&path).unwrap();
    assert_eq!(state.epoch, 4);
    assert_eq!(state.step, 8);
    let again = f._dir.path().join("again.bin");
    checkpoint::save(&mut state, &again).unwrap();
    assert_eq!(bytes, fs::read(&again).unwrap());

    let a = trained().reconstruct(&[f.pairs[0].lr.clone()], &SampleOptions::default()).unwrap();
    let b = state.reconstruct(&[f.pairs[0].lr.clone()], &SampleOptions::default()).unwrap();
    assert_eq!(a.images, b.images);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let f = fixture();
    let mut state = checkpoint::load(&f.run.checkpoint(2)).unwrap();
    assert_eq!(state.epoch, 2);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir { dir: dir.path().to_path_buf() };
    let tail = train(&mut state, &f.pairs, Some(&run)).unwrap();
    assert_eq!(tail.len(), 4);
    assert_eq!(fs::read(run.final_checkpoint()).unwrap(), fs::read(f.run.final_checkpoint()).unwrap());
    for (a, b) in tail.iter().zip(&f.reports[4..]) {
        assert_eq!(a.csv_row(), b.csv_row());
    }
}

#[test]
fn truncated_checkpoint_is_reported() {
    let f = fixture();
    let bytes = fs::read(f.run.final_checkpoint()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cut = dir.path().join("cut.bin");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let err = checkpoint::load(&cut).err().unwrap();
    assert!(matches!(err, MoeError::Truncated { .. }), "{err:?}");
    assert!(checkpoint::load(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn async_modes_against_full_sampling() {
    let f = fixture();
    let state = trained();
    let lr: Vec<_> = f.pairs[..3].iter().map(|p| p.lr.clone()).collect();
    let full = state.reconstruct(&lr, &SampleOptions::default()).unwrap();
    let all = state.reconstruct(&lr, &SampleOptions { mode: SampleMode::Async(3), ..Default::default() }).unwrap();
    assert!(full.sample.z0.max_abs_diff(&all.sample.z0).unwrap() < 1e-9);
    assert_eq!(full.images, all.images);

    let one = state.reconstruct(&lr[..1], &SampleOptions { mode: SampleMode::Async(1), ..Default::default() }).unwrap();
    let g = &one.sample.g.data()[..EXPERTS];
    assert_eq!(one.sample.selected[0], top_k(g, 1));
    let chosen = one.sample.selected[0][0];
    let expected = state.model.shared_params() + state.model.expert_params(chosen);
    assert_eq!(one.sample.touched_params, expected);
    let solo_full = state.reconstruct(&lr[..1], &SampleOptions::default()).unwrap();
    assert!(one.sample.touched_params < solo_full.sample.touched_params);
    assert!(one.sample.estimates.iter().enumerate().all(|(e, est)| est.is_some() == (e == chosen)));

    let two = state.reconstruct(&lr, &SampleOptions { mode: SampleMode::Async(2), ..Default::default() }).unwrap();
    assert!(two.sample.selected.iter().all(|s| s.len() == 2));
    assert!(state.reconstruct(&lr, &SampleOptions { mode: SampleMode::Async(0), ..Default::default() }).is_err());
}

#[test]
fn sampling_variants_are_deterministic_and_in_range() {
    let f = fixture();
    let state = trained();
    let lr = vec![f.pairs[1].lr.clone()];
    for (mixing, start) in [(Mixing::PerStep, ChainStart::LowRes), (Mixing::Final, ChainStart::Noise)] {
        let opts = SampleOptions { mixing, start, seed: 5, ..Default::default() };
        let a = state.reconstruct(&lr, &opts).unwrap();
        let b = state.reconstruct(&lr, &opts).unwrap();
        assert_eq!(a.images, b.images);
        assert!(a.images[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.images[0].shape(), &[1, 64, 64]);
    }
    let other = state.reconstruct(&lr, &SampleOptions { start: ChainStart::Noise, seed: 6, ..Default::default() }).unwrap();
    let seeded = state.reconstruct(&lr, &SampleOptions { start: ChainStart::Noise, seed: 5, ..Default::default() }).unwrap();
    assert_ne!(other.images, seeded.images);
    let wrong = moediff_tensor::Tensor::zeros([1, 24, 24]);
    assert!(matches!(state.reconstruct(&[wrong], &SampleOptions::default()), Err(MoeError::Config(_))));
}

#[test]
fn evaluation_and_difference_maps() {
    let f = fixture();
    let state = trained();
    let (report, rec) = evaluate(&state, &f.pairs[..2], &SampleOptions::default()).unwrap();
    assert_eq!(report.examples.len(), 2);
    assert_eq!(rec.images.len(), 2);
    assert!(report.mean.psnr.is_finite() && report.baseline_mean.psnr.is_finite());
    assert_eq!(report.gates_csv().lines().count(), 3);

    let maps = difference_maps(&state, &f.pairs[2], 0).unwrap();
    assert_eq!(maps.maps.len(), EXPERTS);
    for (m, e) in maps.maps.iter().zip(&maps.energy) {
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((m.mean() - e).abs() < 1e-12);
    }
    assert!((maps.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn cost_report_matches_instrumented_counts() {
    let f = fixture();
    let state = trained();
    let full = report_cost(&state, SampleMode::Full, &f.pairs[0].lr).unwrap();
    let one = report_cost(&state, SampleMode::Async(1), &f.pairs[0].lr).unwrap();
    let listed: usize = full.rows.iter().map(|r| r.params).sum();
    assert_eq!(full.total_params, listed);
    assert_eq!(full.total_params + full.codec_params, state.model.store.numel() + state.codec.store.numel());
    assert_eq!(full.active_params, full.total_params);
    assert!(one.active_params < full.active_params);
    assert!(one.active_macs_per_sample < full.active_macs_per_sample);
    for r in [&full, &one] {
        let gap = (r.touched_params as f64 - r.expected_touched as f64).abs() / r.expected_touched as f64;
        assert!(gap <= 0.01, "{}: touched {} vs {}", r.mode, r.touched_params, r.expected_touched);
    }
    assert!(full.to_text().contains("active/total"));
}

#[test]
fn codec_checkpoint_round_trip() {
    let f = fixture();
    let bytes = fs::read(&f.codec_path).unwrap();
    let mut codec = checkpoint::load_codec(&f.codec_path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("codec.bin");
    checkpoint::save_codec(&mut codec, &again).unwrap();
    assert_eq!(bytes, fs::read(&again).unwrap());
}
