//! Condition encoder, experts and the full joint objective on a micro model.

use moediff_core::codec::CodecConfig;
use moediff_core::condition::{ConditionEncoder, PatchConfig};
use moediff_core::experts::{Expert, ExpertConfig, ExpertKind, NonLocal};
use moediff_core::gating::UsageState;
use moediff_core::losses::VarianceTracker;
use moediff_core::model::{expert_prefix, MoeConfig, MoeModel, StepInput, EXPERTS};
use moediff_core::nn::Init;
use moediff_tensor::gradcheck::{check_gradients, GradCheckOpts};
use moediff_tensor::{Binder, ParamStore, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn encoder(config: PatchConfig, seed: u64) -> (ParamStore, ConditionEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = ConditionEncoder::new(&mut Init::new(&mut store, &mut rng, ""), config).unwrap();
    (store, enc)
}

fn run_tokens(store: &ParamStore, enc: &ConditionEncoder, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    let bd = Binder::new(&tape, store, false);
    (*enc.encode_tokens(&bd, tape.constant(x.clone())).unwrap().value()).clone()
}

#[test]
fn patchify_counts_and_constant_input() {
    let (store, enc) = encoder(PatchConfig::desk(), 1);
    let tape = Tape::inference();
    let bd = Binder::new(&tape, &store, false);
    let scales = enc.patchify(&bd, tape.constant(Tensor::full([2, 1, 64, 64], 0.6))).unwrap();
    let counts: Vec<usize> = scales.iter().map(|v| v.shape()[1]).collect();
    assert_eq!(counts, vec![16, 64, 256]);
    for s in &scales {
        let v = s.value();
        let d = v.shape()[2];
        let first = &v.data()[..d];
        assert!(v.data().chunks(d).all(|row| row == first));
    }
    let seq = enc.encode(&bd, &Tensor::full([1, 1, 64, 64], 0.2)).unwrap();
    assert_eq!(seq.tokens.shape(), &[1, 336, 64]);
    let mut next = 0;
    for &(_, start, len) in &seq.offsets {
        assert_eq!(start, next);
        next += len;
    }
    assert_eq!(next, 336);
    assert!(enc.patchify(&bd, tape.constant(Tensor::zeros([1, 1, 60, 60]))).is_err());
}

#[test]
fn every_patch_scale_receives_gradient() {
    let (store, enc) = encoder(PatchConfig::desk(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let bd = Binder::new(&tape, &store, true);
    let out = enc.forward(&bd, tape.constant(rand_tensor(&mut rng, &[1, 1, 64, 64]))).unwrap();
    tape.backward(out.mul(&out).unwrap().sum().unwrap()).unwrap();
    let grads = bd.grads();
    for i in 0..3 {
        let id = store.find(&format!("cond.patch{i}.weight")).unwrap();
        let g = &grads.iter().find(|(p, _)| *p == id).unwrap().1;
        assert!(g.sum_sq() > 0.0, "patch scale {i} has no gradient");
    }
}

#[test]
fn window_permutation_equivariance() {
    let (store, enc) = encoder(PatchConfig::desk(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (40, 64);
    let x = rand_tensor(&mut rng, &[1, n, d]);
    // shuffle rows 16..32, the second attention window
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (17..32).rev() {
        perm.swap(i, rng.random_range(16..=i));
    }
    let permute = |t: &Tensor| Tensor::from_fn([1, n, d], |i| t.data()[perm[i / d] * d + i % d]);
    let a = permute(&run_tokens(&store, &enc, &x));
    let b = run_tokens(&store, &enc, &permute(&x));
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn zero_attention_projection_leaves_the_residual_stream() {
    let (mut store, enc) = encoder(PatchConfig::desk(), 6);
    for (w, b) in enc.attention_projections() {
        let zw = Tensor::zeros(store.get(w).shape());
        let zb = Tensor::zeros(store.get(b).shape());
        store.set(w, zw).unwrap();
        store.set(b, zb).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (20, 64);
    let x = rand_tensor(&mut rng, &[1, n, d]);
    let all = run_tokens(&store, &enc, &x);
    // without the attention path every token is processed on its own
    for i in [0, 7, 19] {
        let one = run_tokens(&store, &enc, &x.narrow(1, i, 1).unwrap());
        let row = all.narrow(1, i, 1).unwrap();
        assert!(one.max_abs_diff(&row).unwrap() < 1e-12, "token {i}");
    }
}

fn expert_config() -> ExpertConfig {
    ExpertConfig { latent_channels: 4, latent_size: 8, cond_features: 6, cond_grid: 4, base_channels: 8, time_dim: 8 }
}

#[test]
fn experts_emit_latent_shape_and_train_every_parameter() {
    let cfg = expert_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let experts: Vec<Expert> = {
        let mut init_rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init::new(&mut store, &mut init_rng, "");
        ExpertKind::ALL.iter().enumerate().map(|(i, &k)| Expert::new(&mut init, i, k, cfg.clone())).collect()
    };
    let z = rand_tensor(&mut rng, &[2, 4, 8, 8]);
    let grid = rand_tensor(&mut rng, &[2, 4, 4, 6]);
    let eps = rand_tensor(&mut rng, &[2, 4, 8, 8]);
    for (i, expert) in experts.iter().enumerate() {
        let tape = Tape::new();
        let bd = Binder::new(&tape, &store, true);
        let out = expert
            .predict_eps(&bd, tape.constant(z.clone()), tape.constant(grid.clone()), &[3, 11], &[0.2, 0.7])
            .unwrap();
        assert_eq!(out.shape(), vec![2, 4, 8, 8]);
        let loss = out.mse(&tape.constant(eps.clone())).unwrap();
        tape.backward(loss).unwrap();
        let grads = bd.grads();
        let prefix = expert_prefix(i);
        let owned: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).collect();
        assert!(!owned.is_empty());
        for (id, p) in owned {
            let g = grads.iter().find(|(g, _)| *g == id);
            let g = g.unwrap_or_else(|| panic!("{} untouched", p.name));
            assert!(g.1.sum_sq() > 0.0, "{} has zero gradient", p.name);
        }
        let bad = expert.predict_eps(&bd, tape.constant(Tensor::zeros([1, 3, 8, 8])), tape.constant(grid.clone()), &[1], &[0.5]);
        assert!(bad.is_err());
    }
}

#[test]
fn zeroed_value_projection_makes_nonlocal_an_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let block = NonLocal::new(&mut Init::new(&mut store, &mut rng, ""), "nl", 8);
    let w = block.value.weight;
    let zeros = Tensor::zeros(store.get(w).shape());
    store.set(w, zeros).unwrap();
    let x = rand_tensor(&mut rng, &[2, 8, 4, 4]);
    let tape = Tape::inference();
    let bd = Binder::new(&tape, &store, false);
    let y = block.forward(&bd, tape.constant(x.clone())).unwrap().value();
    assert_eq!(*y, x);
}

fn micro_config() -> MoeConfig {
    MoeConfig {
        patch: PatchConfig { input_size: 16, scales: vec![8, 4], embed_dim: 8, window: 4, heads: 2, layers: 1 },
        codec: CodecConfig { base_channels: 4, codebook_size: 4, code_dim: 2, ..CodecConfig::desk() },
        expert_channels: 4,
        time_dim: 4,
        steps: vec![3, 4, 5],
        stft_windows: vec![2, 4],
        diversity_grad: true,
        ..MoeConfig::desk()
    }
}

fn lift<T>(r: moediff_core::Result<T>) -> moediff_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

#[test]
fn joint_objective_matches_finite_differences() {
    let model = MoeModel::new(micro_config()).unwrap();
    let params: Vec<Tensor> = model.store.iter().map(|(_, p)| (*p.value).clone()).collect();
    let usage = UsageState { c: vec![0.5, 0.2, 0.3], ..UsageState::new(EXPERTS) };
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let b = 4;
        let mut input = StepInput {
            cond: Tensor::from_fn([b, 1, 16, 16], |_| rng.random_range(0.0..1.0)),
            z0: rand_tensor(&mut rng, &[b, 2, 4, 4]),
            t: model.config.steps.iter().map(|&s| (0..b).map(|_| rng.random_range(1..=s)).collect()).collect(),
            eps: (0..EXPERTS).map(|_| rand_tensor(&mut rng, &[b, 2, 4, 4])).collect(),
            warmup: false,
            frozen: None,
        };
        // decay 1 freezes the weight at 1/0.25
        let frozen = VarianceTracker { decay: 1.0, mean: 0.0, second_moment: 0.25, initialized: true };
        // pin the objective's constants for the perturbed passes too
        let tape = Tape::inference();
        let bd = Binder::new(&tape, &model.store, false);
        let out = model.training_forward(&bd, &input, &usage, &mut frozen.clone()).unwrap();
        input.frozen = Some(out.constants);
        let opts = GradCheckOpts { max_probes_per_input: 3, ..GradCheckOpts::default() };
        let report = check_gradients(&params, opts, |tape, vars| {
            let bd = Binder::with_vars(tape, &model.store, vars)?;
            let mut tracker = frozen.clone();
            let out = lift(model.training_forward(&bd, &input, &usage, &mut tracker))?;
            assert_eq!(out.report.weight, 4.0);
            Ok(out.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
        assert!(report.probes > 3 * model.store.len() / 2);
    }
}
