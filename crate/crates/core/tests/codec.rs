//! Latent codec: quantizer brute-force oracle, encoder/decoder contracts.

use moediff_core::codec::*;
use moediff_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(v: &[f64], codebook: &Tensor) -> usize {
    let d = codebook.shape()[1];
    let mut best = (f64::INFINITY, 0);
    for (j, row) in codebook.data().chunks(d).enumerate() {
        let dist: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.0 {
            best = (dist, j);
        }
    }
    best.1
}

#[test]
fn quantizer_matches_brute_force_scan() {
    let cfg = CodecConfig::desk();
    let mut codec = VqCodec::new(cfg.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cb = Tensor::from_fn([cfg.codebook_size, cfg.code_dim], |_| rng.random_range(-1.0..1.0));
    let id = codec.codebook_id();
    codec.store.set(id, cb.clone()).unwrap();

    // 16 x 8 x 8 = 1024 latent vectors
    let (b, d, h, w) = (16, cfg.code_dim, 8, 8);
    let z = Tensor::from_fn([b, d, h, w], |_| rng.random_range(-0.3..0.3));
    let (zq, indices, _) = codec.quantize(&LatentCode { z: z.clone(), scale_factor: cfg.scale_factor }).unwrap();
    assert_eq!(indices.len(), b * h * w);
    let mut mismatches = 0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let v: Vec<f64> =
                    (0..d).map(|c| z.data()[((bi * d + c) * h + y) * w + x] / cfg.scale_factor).collect();
                let k = indices[(bi * h + y) * w + x];
                if k != brute_force(&v, &cb) {
                    mismatches += 1;
                }
                for c in 0..d {
                    let got = zq.z.data()[((bi * d + c) * h + y) * w + x];
                    assert!((got - cb.data()[k * d + c] * cfg.scale_factor).abs() < 1e-12);
                }
            }
        }
    }
    assert_eq!(mismatches, 0);

    let flat = Tensor::from_fn([1000, d], |_| rng.random_range(-1.0..1.0));
    let idx = nearest_codes(&flat, &cb);
    for (i, row) in flat.data().chunks(d).enumerate() {
        assert_eq!(idx[i], brute_force(row, &cb));
    }
}

#[test]
fn codewords_quantize_to_themselves_with_zero_losses() {
    let cfg = CodecConfig::desk();
    let codec = VqCodec::new(cfg.clone(), 3);
    let cb = codec.codebook().clone();
    let d = cfg.code_dim;
    let z = Tensor::from_fn([d, 2, 2], |i| {
        let (c, pos) = (i / 4, i % 4);
        cb.data()[(pos * 5) * d + c] * cfg.scale_factor
    });
    let (zq, idx, losses) = codec.quantize(&LatentCode { z: z.clone(), scale_factor: cfg.scale_factor }).unwrap();
    assert_eq!(idx, vec![0, 5, 10, 15]);
    assert!(zq.z.max_abs_diff(&z).unwrap() < 1e-15);
    assert!(losses.codebook.abs() < 1e-24 && losses.commitment.abs() < 1e-24);
}

fn slice(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([1, 32, 32], |_| rng.random_range(0.0..1.0));
    let b = Tensor::from_fn([1, 32, 32], |_| rng.random_range(0.8..1.2));
    let g = Tensor::from_fn([2, 32, 32], |_| rng.random_range(-1.0..1.0));
    (x, b, g)
}

#[test]
fn encoder_contracts() {
    let codec = VqCodec::new(CodecConfig::desk(), 4);
    let (x, b, g) = slice(5);
    let code = codec.encode(&x, &b, &g).unwrap();
    assert_eq!(code.z.shape(), &[16, 8, 8]);
    assert_eq!(code, codec.encode(&x, &b, &g).unwrap());

    let doubled = VqCodec::new(CodecConfig { scale_factor: 0.4, ..CodecConfig::desk() }, 4);
    let z2 = doubled.encode(&x, &b, &g).unwrap();
    assert!(z2.z.max_abs_diff(&code.z.scale(2.0)).unwrap() < 1e-12);

    assert!(codec.encode(&x, &b.map(|v| v - 1.0), &g).is_err());
    assert!(codec.encode(&x, &b, &Tensor::zeros([1, 32, 32])).is_err());
}

#[test]
fn decoder_contracts() {
    let codec = VqCodec::new(CodecConfig::desk(), 6);
    let (x, b, g) = slice(7);
    let code = codec.encode(&x, &b, &g).unwrap();
    let img = codec.decode(&code).unwrap();
    assert_eq!(img.shape(), &[1, 32, 32]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(img, codec.decode(&code).unwrap());
    let batch = Tensor::concat(&[&code.z, &code.z], 0).unwrap().reshape([2, 16, 8, 8]).unwrap();
    let both = codec.decode(&LatentCode { z: batch, scale_factor: code.scale_factor }).unwrap();
    assert_eq!(both.shape(), &[2, 1, 32, 32]);
    assert_eq!(&both.data()[..1024], img.data());
}
