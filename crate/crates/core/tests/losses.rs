//! Loss oracles: closed forms, brute-force re-implementations and
//! finite-difference checks of every composite objective.

use std::f64::consts::PI;

use moediff_core::losses::*;
use moediff_tensor::gradcheck::{check_gradients, GradCheckOpts};
use moediff_tensor::{hann, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn eval(f: impl for<'t> Fn(&'t Tape) -> Var<'t>) -> Tensor {
    let tape = Tape::inference();
    (*f(&tape).value()).clone()
}

fn eval2(a: &Tensor, b: &Tensor, f: impl for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t>) -> Tensor {
    eval(|t| f(t.constant(a.clone()), t.constant(b.clone())))
}

fn assert_grad<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> moediff_tensor::Result<Var<'t>>,
{
    let r = check_gradients(inputs, GradCheckOpts::default(), f).unwrap();
    assert!(r.max_rel_err < GRAD_TOL, "{name}: rel err {:.3e} at {:?}", r.max_rel_err, r.worst);
}

fn lift<T>(r: moediff_core::Result<T>) -> moediff_tensor::Result<T> {
    r.map_err(|e| moediff_tensor::TensorError::Contract(e.to_string()))
}

// ---- naive references ----

/// `Σ_c Σ_uv |DFT(window ⊙ d)[u,v]|²` for one `[C, H, W]` example, by direct summation.
fn naive_window_power(d: &[f64], c: usize, h: usize, w: usize, r0: usize, c0: usize, win: usize, taper: &[f64]) -> f64 {
    let cs: Vec<f64> = (0..win).map(|k| (2.0 * PI * k as f64 / win as f64).cos()).collect();
    let sn: Vec<f64> = (0..win).map(|k| (2.0 * PI * k as f64 / win as f64).sin()).collect();
    let mut total = 0.0;
    for ch in 0..c {
        for u in 0..win {
            for v in 0..win {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..win {
                    for n in 0..win {
                        let x = taper[m] * taper[n] * d[ch * h * w + (r0 + m) * w + c0 + n];
                        let k = (u * m + v * n) % win;
                        re += x * cs[k];
                        im -= x * sn[k];
                    }
                }
                total += re * re + im * im;
            }
        }
    }
    total
}

fn naive_stft_loss(a: &Tensor, b: &Tensor, windows: &[usize]) -> Vec<f64> {
    let s = a.shape();
    let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    (0..bs)
        .map(|bi| {
            let d: Vec<f64> = (0..per).map(|i| a.data()[bi * per + i] - b.data()[bi * per + i]).collect();
            let mut loss = 0.0;
            for &win in windows {
                let hop = (win / 2).max(1);
                let taper = hann(win);
                let mut r0 = 0;
                while r0 + win <= h {
                    let mut c0 = 0;
                    while c0 + win <= w {
                        let p = naive_window_power(&d, c, h, w, r0, c0, win, &taper);
                        loss += p / (c * win * win) as f64 / (win * win) as f64;
                        c0 += hop;
                    }
                    r0 += hop;
                }
            }
            loss
        })
        .collect()
}

fn naive_fourier(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let s = a.shape();
    let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(h, w);
    let per = c * h * w;
    let ones = vec![1.0; h];
    (0..bs)
        .map(|bi| {
            let d: Vec<f64> = (0..per).map(|i| a.data()[bi * per + i] - b.data()[bi * per + i]).collect();
            naive_window_power(&d, c, h, w, 0, 0, h, &ones) / per as f64 / (h * w) as f64
        })
        .collect()
}

// ---- expert losses ----

#[test]
fn stft_matches_nested_loops_on_32x32_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for windows in [vec![4], vec![8], vec![16], vec![32], vec![4, 8, 16], vec![8, 16, 32]] {
        let a = rand_tensor(&mut rng, &[2, 2, 32, 32]);
        let b = rand_tensor(&mut rng, &[2, 2, 32, 32]);
        let got = eval2(&a, &b, |x, y| task3_per_example(x, y, &windows).unwrap());
        let want = naive_stft_loss(&a, &b, &windows);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "windows {windows:?}: {g} vs {w}");
        }
    }
}

#[test]
fn stft_single_window_equals_tapered_fourier_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let b = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let taper = hann(8);
    let tapered = |x: &Tensor| {
        Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * taper[(i / 8) % 8] * taper[i % 8])
    };
    let stft = eval2(&a, &b, |x, y| task3_per_example(x, y, &[8]).unwrap());
    let fourier = eval2(&tapered(&a), &tapered(&b), |x, y| fourier_term_per_example(x, y).unwrap());
    assert!(stft.max_abs_diff(&fourier).unwrap() < 1e-12);
}

#[test]
fn stft_is_additive_over_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&mut rng, &[1, 2, 16, 16]);
    let b = rand_tensor(&mut rng, &[1, 2, 16, 16]);
    let joint = eval2(&a, &b, |x, y| task3_stft(x, y, &[4, 8, 16]).unwrap()).item().unwrap();
    let split: f64 = [4, 8, 16]
        .iter()
        .map(|&w| eval2(&a, &b, |x, y| task3_stft(x, y, &[w]).unwrap()).item().unwrap())
        .sum();
    assert!((joint - split).abs() < 1e-12);
}

#[test]
fn stft_window_counts_and_limits() {
    let tape = Tape::inference();
    let x = tape.constant(Tensor::zeros([1, 1, 16, 16]));
    assert_eq!(x.stft2(8, 4).unwrap().len(), 9);
    let z = tape.constant(Tensor::zeros([1, 1, 8, 8]));
    assert!(task3_per_example(z, z, &[16]).is_err());
    assert_eq!(task3_stft(z, z, &[4, 8]).unwrap().item().unwrap(), 0.0);
}

#[test]
fn fourier_term_matches_direct_dft_and_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_tensor(&mut rng, &[3, 2, 8, 8]);
    let b = rand_tensor(&mut rng, &[3, 2, 8, 8]);
    let got = eval2(&a, &b, |x, y| fourier_term_per_example(x, y).unwrap());
    let mse = eval2(&a, &b, |x, y| mse_per_example(x, y).unwrap());
    for ((g, w), m) in got.data().iter().zip(naive_fourier(&a, &b)).zip(mse.data()) {
        assert!((g - w).abs() < 1e-10);
        assert!((g - m).abs() < 1e-10, "Parseval: {g} vs {m}");
    }
}

#[test]
fn task2_on_constants_is_the_squared_offset() {
    let (c1, c2) = (0.7, -0.2);
    let a = Tensor::full([2, 3, 8, 8], c1);
    let b = Tensor::full([2, 3, 8, 8], c2);
    let sobel = eval2(&a, &b, |x, y| sobel_term_per_example(x, y).unwrap());
    assert!(sobel.data().iter().all(|v| v.abs() < 1e-24));
    let got = eval2(&a, &b, |x, y| task2_per_example(x, y).unwrap());
    let want = naive_fourier(&a, &b);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
        assert!((g - (c1 - c2) * (c1 - c2)).abs() < 1e-12);
    }
}

#[test]
fn task2_cancels_a_shared_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_tensor(&mut rng, &[2, 2, 8, 8]);
    let b = rand_tensor(&mut rng, &[2, 2, 8, 8]);
    let s = rand_tensor(&mut rng, &[2, 2, 8, 8]);
    let base = eval2(&a, &b, |x, y| task2_edge_freq(x, y).unwrap()).item().unwrap();
    let shifted = eval2(&a.add(&s).unwrap(), &b.add(&s).unwrap(), |x, y| task2_edge_freq(x, y).unwrap()).item().unwrap();
    assert!((base - shifted).abs() < 1e-10 * base.max(1.0));
}

#[test]
fn perceptual_bank_is_pinned() {
    let bank = FixedPerceptualBank::new();
    assert_eq!(bank.levels, 3);
    assert_eq!(bank.fingerprint(), PERCEPTUAL_FINGERPRINT);
}

const PERCEPTUAL_FINGERPRINT: &str = "dd617191ac560d26844d6f9c76289e52160e2af79ba07119051f96d4e2530694";

#[test]
fn perceptual_constant_offset() {
    // Edge filters sum to zero; the normalized Gaussian passes the offset at each level.
    let bank = FixedPerceptualBank::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = rand_tensor(&mut rng, &[2, 2, 16, 16]);
    for delta in [0.1, -0.35] {
        let b = a.map(|v| v + delta);
        let got = eval2(&a, &b, |x, y| task1_per_example(&bank, x, y).unwrap());
        let want = (1 + bank.levels) as f64 * delta * delta;
        assert!(got.data().iter().all(|g| (g - want).abs() < 1e-12), "{got:?} vs {want}");
    }
}

#[test]
fn mse_matches_two_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    let b = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    let got = eval2(&a, &b, |x, y| diffusion_loss(x, y).unwrap()).item().unwrap();
    let mut naive = 0.0;
    for i in 0..2 {
        for j in 0..16 {
            naive += (a.data()[i * 16 + j] - b.data()[i * 16 + j]).powi(2);
        }
    }
    assert!((got - naive / 32.0).abs() < 1e-12);
    let one = eval2(&a, &a.map(|v| v + 1.0), |x, y| diffusion_loss(x, y).unwrap()).item().unwrap();
    assert!((one - 1.0).abs() < 1e-12);
    assert_eq!(eval2(&a, &a, |x, y| diffusion_loss(x, y).unwrap()).item().unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn task_losses_are_symmetric_and_vanish_on_equal_inputs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[1, 2, 8, 8]);
        let b = rand_tensor(&mut rng, &[1, 2, 8, 8]);
        let bank = FixedPerceptualBank::new();
        type Loss = for<'t> fn(&FixedPerceptualBank, Var<'t>, Var<'t>) -> Var<'t>;
        let losses: [Loss; 3] = [
            |bk, x, y| task1_perceptual(bk, x, y).unwrap(),
            |_, x, y| task2_edge_freq(x, y).unwrap(),
            |_, x, y| task3_stft(x, y, &[2, 4, 8]).unwrap(),
        ];
        for f in losses {
            let ab = eval2(&a, &b, |x, y| f(&bank, x, y)).item().unwrap();
            let ba = eval2(&b, &a, |x, y| f(&bank, x, y)).item().unwrap();
            let aa = eval2(&a, &a, |x, y| f(&bank, x, y)).item().unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
            prop_assert!(ab > 0.0);
            prop_assert_eq!(aa, 0.0);
        }
    }
}

// ---- gating objective ----

#[test]
fn mad_temperature_examples() {
    assert!((median(&[0.2, 0.5, 0.8]).unwrap() - 0.5).abs() < 1e-15);
    assert!((mad_temperature(&[0.2, 0.5, 0.8]).unwrap() - 0.44478).abs() < 1e-5);
    assert!((median(&[0.1, 0.2, 0.8, 0.9]).unwrap() - 0.5).abs() < 1e-15);
    assert!((mad_temperature(&[0.1, 0.2, 0.8, 0.9]).unwrap() - 0.51891).abs() < 1e-5);
    assert_eq!(mad_temperature(&[0.4; 5]).unwrap(), TEMPERATURE_FLOOR);
    assert!(mad_temperature(&[]).is_err());
}

#[test]
fn supervised_targets_examples() {
    let cos = Tensor::new([1, 3], vec![0.9, 0.5, 0.1]).unwrap();
    let g = supervised_gate_targets(&cos, 0.2).unwrap();
    let z: f64 = [4.5f64, 2.5, 0.5].iter().map(|v| v.exp()).sum();
    for (gi, li) in g.data().iter().zip([4.5f64, 2.5, 0.5]) {
        assert!((gi - li.exp() / z).abs() < 1e-12);
    }
    for (gi, printed) in g.data().iter().zip([0.8668, 0.1173, 0.0159]) {
        assert!((gi - printed).abs() < 5e-5);
    }
    let same = supervised_gate_targets(&Tensor::full([2, 3], 0.3), 0.05).unwrap();
    assert!(same.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    let hot = supervised_gate_targets(&cos, 1e9).unwrap();
    assert!(hot.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-8));
    assert!(supervised_gate_targets(&cos, 0.0).is_err());
}

#[test]
fn gating_term_constants() {
    let tape = Tape::inference();
    let uniform = Tensor::full([4, 3], 1.0 / 3.0);
    let sup = supervised_gating_term(tape.constant(uniform.clone()), &uniform).unwrap().item().unwrap();
    assert!((sup - 3f64.ln() / 3.0).abs() < 1e-5);
    assert!((sup - 0.3662).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let e = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let same: Vec<Var> = (0..3).map(|_| tape.constant(e.clone())).collect();
    let div = diversity_term(&same).unwrap().item().unwrap();
    assert!((div - 2f64.ln()).abs() < 1e-5);

    // Disjoint supports are mutually orthogonal.
    let ortho: Vec<Var> = (0..3)
        .map(|k| tape.constant(Tensor::from_fn([1, 1, 3, 3], |i| if i % 3 == k { 1.0 + i as f64 } else { 0.0 })))
        .collect();
    assert!(diversity_term(&ortho).unwrap().item().unwrap().abs() < 1e-12);
}

#[test]
fn expert_loss_arithmetic() {
    let tape = Tape::inference();
    let g = tape.constant(Tensor::new([1, 3], vec![0.21, 0.48, 0.31]).unwrap());
    let l: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&v| tape.constant(Tensor::new([1], vec![v]).unwrap())).collect();
    let le = expert_losses(g, &l).unwrap();
    assert!((le.item().unwrap() - 2.10).abs() < 1e-12);

    let uniform = tape.constant(Tensor::full([2, 3], 1.0 / 3.0));
    let flat: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::full([2], 0.7))).collect();
    assert!((expert_losses(uniform, &flat).unwrap().item().unwrap() - 0.7).abs() < 1e-12);
    let hot = tape.constant(Tensor::new([2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let per: Vec<Var> = (0..3).map(|k| tape.constant(Tensor::new([2], vec![k as f64, 2.0 * k as f64]).unwrap())).collect();
    assert!((expert_losses(hot, &per).unwrap().item().unwrap() - 1.5).abs() < 1e-12);

    let lg = tape.constant(Tensor::scalar(3f64.ln() / 3.0));
    let total = total_loss(le, lg, 1.0).unwrap().item().unwrap();
    assert!((total - 2.4662).abs() < 1e-4);
    assert!((total_loss(le, lg, 0.0).unwrap().item().unwrap() - 2.10).abs() < 1e-12);
}

#[test]
fn variance_tracker_contract() {
    let mut t = VarianceTracker::default();
    assert_eq!(t.update(0.8), 1.0);
    for _ in 0..2000 {
        t.update(0.8);
    }
    assert_eq!(t.weight(), MAX_WEIGHT);

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let normal = rand_distr::Normal::new(0.5, 0.2).unwrap();
    let mut t = VarianceTracker::default();
    for _ in 0..2000 {
        t.update(rng.sample(normal));
    }
    assert!((t.variance() - 0.04).abs() < 0.3 * 0.04, "variance {}", t.variance());
    assert!((t.weight() - 25.0).abs() < 0.45 * 25.0, "weight {}", t.weight());
}

// ---- finite-difference checks of the composite objectives ----

fn micro_inputs(seed: u64, shape: &[usize], n: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rand_tensor(&mut rng, shape)).collect()
}

#[test]
fn diffusion_loss_gradient() {
    for s in 0..3 {
        assert_grad("diffusion", &micro_inputs(100 + s, &[2, 2, 4, 4], 2), |_, v| lift(diffusion_loss(v[0], v[1])));
    }
}

#[test]
fn task1_gradient() {
    let bank = FixedPerceptualBank::new();
    for s in 0..3 {
        assert_grad("task1", &micro_inputs(110 + s, &[2, 2, 8, 8], 2), |_, v| lift(task1_perceptual(&bank, v[0], v[1])));
    }
}

#[test]
fn task2_gradient() {
    for s in 0..3 {
        assert_grad("task2", &micro_inputs(120 + s, &[2, 2, 6, 6], 2), |_, v| lift(task2_edge_freq(v[0], v[1])));
    }
}

#[test]
fn task3_gradient() {
    for s in 0..3 {
        assert_grad("task3", &micro_inputs(130 + s, &[2, 2, 8, 8], 2), |_, v| lift(task3_stft(v[0], v[1], &[2, 4, 8])));
    }
}

fn gate_of<'t>(logits: Var<'t>) -> moediff_tensor::Result<Var<'t>> {
    logits.softmax()
}

#[test]
fn gating_loss_gradient() {
    for s in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(140 + s);
        let logits = rand_tensor(&mut rng, &[2, 3]);
        let target = supervised_gate_targets(&rand_tensor(&mut rng, &[2, 3]), 0.3).unwrap();
        let mut inputs = vec![logits];
        inputs.extend(micro_inputs(150 + s, &[2, 1, 3, 3], 3));
        assert_grad("gating", &inputs, |_, v| {
            let (sup, div) = lift(gating_loss(gate_of(v[0])?, &target, &v[1..4]))?;
            sup.add(&div)
        });
    }
}

#[test]
fn total_loss_gradient_with_frozen_weight() {
    let bank = FixedPerceptualBank::new();
    for s in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(160 + s);
        let z0 = rand_tensor(&mut rng, &[2, 2, 8, 8]);
        let target = supervised_gate_targets(&rand_tensor(&mut rng, &[2, 3]), 0.3).unwrap();
        let w = rng.random_range(0.5..20.0);
        let mut inputs = vec![rand_tensor(&mut rng, &[2, 3])];
        inputs.extend(micro_inputs(170 + s, &[2, 2, 8, 8], 3));
        assert_grad("total", &inputs, |tape, v| {
            let z0 = tape.constant(z0.clone());
            let g = gate_of(v[0])?;
            let per = vec![
                lift(task1_per_example(&bank, z0, v[1]))?,
                lift(task2_per_example(z0, v[2]))?,
                lift(task3_per_example(z0, v[3], &[4, 8]))?,
            ];
            let le = lift(expert_losses(g, &per))?;
            let (sup, div) = lift(gating_loss(g, &target, &v[1..4]))?;
            lift(total_loss(le, sup.add(&div)?, w))
        });
    }
}
