//! Checkpoints in the shared record container.
//!
//! Saving first rounds every floating-point state value (parameters, optimizer
//! moments, usage, variance tracker) to `f32` in place, so the live state and
//! the file agree exactly: a resumed run continues bit-for-bit like an
//! uninterrupted one, and save → load → save reproduces the same bytes.

use std::fs;
use std::path::Path;

use moediff_tensor::optim::{AdamW, AdamWConfig};
use moediff_tensor::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{CodecConfig, VqCodec};
use crate::error::{MoeError, Result};
use crate::gating::UsageState;
use crate::losses::VarianceTracker;
use crate::model::{MoeModel, EXPERTS};
use crate::records::{self, bytes_to_tensor, round_f32, tensor_to_bytes, tensor_to_u64, u64_to_tensor};
use crate::training::{TrainConfig, TrainState};

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn round_store(store: &mut ParamStore) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let r = round_f32(store.get(id));
        store.set(id, r)?;
    }
    Ok(())
}

fn round_state(state: &mut TrainState) -> Result<()> {
    round_store(&mut state.model.store)?;
    round_store(&mut state.codec.store)?;
    for (m, v) in &mut state.opt.moments {
        *m = round_f32(m);
        *v = round_f32(v);
    }
    state.usage.c.iter_mut().for_each(|c| *c = f32_round(*c));
    let t = &mut state.tracker;
    t.mean = f32_round(t.mean);
    t.second_moment = f32_round(t.second_moment);
    Ok(())
}

fn store_records<'a>(store: &'a ParamStore, out: &mut Vec<(String, &'a Tensor)>) {
    for (_, p) in store.iter() {
        out.push((p.name.clone(), p.value.as_ref()));
    }
}

/// Codec-only checkpoint written by the codec training stage.
pub fn save_codec(codec: &mut VqCodec, path: &Path) -> Result<()> {
    round_store(&mut codec.store)?;
    let cfg = bytes_to_tensor(serde_json::to_string(&codec.config).expect("serializable").as_bytes());
    let mut recs: Vec<(String, &Tensor)> = vec![("meta.codec".into(), &cfg)];
    store_records(&codec.store, &mut recs);
    write(path, &recs)
}

fn write(path: &Path, recs: &[(String, &Tensor)]) -> Result<()> {
    let borrowed: Vec<(&str, &Tensor)> = recs.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MoeError::io(dir, e))?;
    }
    records::write(path, &borrowed)
}

fn config_json<T: serde::de::DeserializeOwned>(t: &Tensor, path: &Path) -> Result<T> {
    serde_json::from_slice(&tensor_to_bytes(t)).map_err(|e| MoeError::format(path, format!("bad embedded config: {e}")))
}

fn fill_store(store: &mut ParamStore, recs: &mut Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = records::take(recs, &name, path)?;
        if t.shape() != store.get(id).shape() {
            return Err(MoeError::format(
                path,
                format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), store.get(id).shape()),
            ));
        }
        store.set(id, t)?;
    }
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<VqCodec> {
    let mut recs = records::read(path)?;
    let cfg: CodecConfig = config_json(&records::take(&mut recs, "meta.codec", path)?, path)?;
    let mut codec = VqCodec::new(cfg, 0);
    fill_store(&mut codec.store, &mut recs, path)?;
    Ok(codec)
}

fn split_u128(v: u128) -> [u64; 2] {
    [v as u64, (v >> 64) as u64]
}

/// Writes the full training state, rounding it to file precision first.
pub fn save(state: &mut TrainState, path: &Path) -> Result<()> {
    round_state(state)?;
    let owned: Vec<(String, Tensor)> = {
        let mut v = vec![
            (
                "meta.config".to_string(),
                bytes_to_tensor(serde_json::to_string(&state.config).expect("serializable").as_bytes()),
            ),
            ("meta.epoch".into(), u64_to_tensor(state.epoch as u64)),
            ("meta.step".into(), u64_to_tensor(state.step as u64)),
            ("rng.seed".into(), bytes_to_tensor(&state.rng.get_seed())),
            ("rng.stream".into(), u64_to_tensor(state.rng.get_stream())),
        ];
        let [lo, hi] = split_u128(state.rng.get_word_pos());
        v.push(("rng.word_pos_lo".into(), u64_to_tensor(lo)));
        v.push(("rng.word_pos_hi".into(), u64_to_tensor(hi)));
        v.push(("opt.step".into(), u64_to_tensor(state.opt.step)));
        v.push(("usage.c".into(), Tensor::new([EXPERTS], state.usage.c.clone())?));
        let t = &state.tracker;
        v.push((
            "tracker".into(),
            Tensor::new([3], vec![t.mean, t.second_moment, if t.initialized { 1.0 } else { 0.0 }])?,
        ));
        v
    };
    let mut recs: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    store_records(&state.codec.store, &mut recs);
    store_records(&state.model.store, &mut recs);
    for ((_, p), (m, v)) in state.model.store.iter().zip(&state.opt.moments) {
        recs.push((format!("m.{}", p.name), m));
        recs.push((format!("v.{}", p.name), v));
    }
    write(path, &recs)
}

/// Restores a training state written by [`save`].
pub fn load(path: &Path) -> Result<TrainState> {
    let mut recs = records::read(path)?;
    let mut take = |name: &str| records::take(&mut recs, name, path);
    let config: TrainConfig = config_json(&take("meta.config")?, path)?;
    let epoch = tensor_to_u64(&take("meta.epoch")?) as usize;
    let step = tensor_to_u64(&take("meta.step")?) as usize;
    let seed: [u8; 32] = tensor_to_bytes(&take("rng.seed")?)
        .try_into()
        .map_err(|_| MoeError::format(path, "rng seed must be 32 bytes"))?;
    let stream = tensor_to_u64(&take("rng.stream")?);
    let lo = tensor_to_u64(&take("rng.word_pos_lo")?) as u128;
    let hi = tensor_to_u64(&take("rng.word_pos_hi")?) as u128;
    let opt_step = tensor_to_u64(&take("opt.step")?);
    let usage_c = take("usage.c")?;
    let tracker = take("tracker")?;
    if usage_c.numel() != EXPERTS || tracker.numel() != 3 {
        return Err(MoeError::format(path, "malformed usage or tracker record"));
    }

    let mut codec = VqCodec::new(config.model.codec.clone(), 0);
    fill_store(&mut codec.store, &mut recs, path)?;
    let mut model = MoeModel::new(config.model.clone())?;
    fill_store(&mut model.store, &mut recs, path)?;
    let mut opt = AdamW::new(&model.store, AdamWConfig { weight_decay: config.weight_decay, ..Default::default() });
    opt.step = opt_step;
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    for (name, (m, v)) in names.iter().zip(opt.moments.iter_mut()) {
        *m = records::take(&mut recs, &format!("m.{name}"), path)?;
        *v = records::take(&mut recs, &format!("v.{name}"), path)?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));
    let usage = UsageState { c: usage_c.data().to_vec(), decay: config.model.usage_decay, gamma: config.model.gamma };
    let tr = tracker.data();
    let tracker = VarianceTracker { mean: tr[0], second_moment: tr[1], initialized: tr[2] != 0.0, ..Default::default() };
    Ok(TrainState { config, codec, model, opt, usage, tracker, epoch, step, rng })
}
