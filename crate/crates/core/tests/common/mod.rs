//! Shared fixtures for the integration suites: randomized micro-scale
//! models and batches.

#![allow(dead_code)]

pub mod checks;
pub mod equivalence;
pub mod grad_ops;

use cmac_core::oracle::{micro_config, NaiveBatch};
use cmac_core::{AvBatch, CmacModel, ContrastiveConfig, MemoryBank, Modality, ModelConfig, Module, NormKind, NormMode, PcfConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row = uniform(rng, d, -1.0, 1.0);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(data, shape).unwrap()
}

/// Micro configuration with every ablation switch drawn at random.
pub fn random_micro_config(rng: &mut impl Rng) -> ModelConfig {
    let mut cfg = micro_config();
    cfg.norm = if rng.random_bool(0.75) { NormKind::Batch } else { NormKind::Identity };
    cfg.pcf = PcfConfig {
        mode: [NormMode::Cosine, NormMode::Softmax, NormMode::None][rng.random_range(0..3)],
        scales: rng.random_range(1..=2),
    };
    cfg.contrastive = ContrastiveConfig {
        tau: rng.random_range(0.05..0.5),
        use_within_modal_negatives: rng.random_bool(0.5),
        use_within_modal_positives: rng.random_bool(0.5),
        lambda: rng.random_range(0.0..3.0),
    };
    cfg.detach_guidance = rng.random_bool(0.5);
    cfg
}

/// A model whose online weights, targets, running statistics and banks
/// have all been moved away from their initial values.
pub fn scrambled_model(cfg: &ModelConfig, rng: &mut impl Rng) -> CmacModel {
    let mut model = CmacModel::new(cfg, rng.random()).unwrap();
    for p in model.parameters_mut() {
        let v: Vec<f64> = p.values().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        p.set_values(&v).unwrap();
    }
    for p in model.target_parameters_mut() {
        let v: Vec<f64> = p.values().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        p.set_values(&v).unwrap();
    }
    let mut fill = |bufs: Vec<(String, &mut Vec<f64>)>| {
        for (name, b) in bufs {
            let (lo, hi) = if name.ends_with("running_var") { (0.5, 2.0) } else { (-0.5, 0.5) };
            for v in b.iter_mut() {
                *v = rng.random_range(lo..hi);
            }
        }
    };
    fill(model.buffers_mut());
    fill(model.target_buffers_mut());
    let d = cfg.embed_dim;
    let cap = cfg.bank_capacity;
    let (nv, na) = (rng.random_range(0..=cap + 3), rng.random_range(0..=cap + 3));
    model.bank_v = MemoryBank::new(Modality::Visual, cap, d);
    model.bank_a = MemoryBank::new(Modality::Audio, cap, d);
    model.bank_v.push(&unit_rows(rng, nv, d)).unwrap();
    model.bank_a.push(&unit_rows(rng, na, d)).unwrap();
    model
}

/// Random inputs in both layouts, with second clips when the config asks
/// for them.
pub fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut impl Rng) -> (AvBatch, NaiveBatch) {
    let vshape: Vec<usize> = [n, cfg.visual.in_channels].iter().chain(&cfg.visual.input).copied().collect();
    let ashape: Vec<usize> = [n, cfg.audio.in_channels].iter().chain(&cfg.audio.input).copied().collect();
    let vlen: usize = vshape.iter().product();
    let alen: usize = ashape.iter().product();
    let v = uniform(rng, vlen, 0.0, 1.0);
    let a = uniform(rng, alen, 0.0, 1.0);
    let (v2, a2) = if cfg.contrastive.use_within_modal_positives {
        (Some(uniform(rng, vlen, 0.0, 1.0)), Some(uniform(rng, alen, 0.0, 1.0)))
    } else {
        (None, None)
    };
    let mut batch = AvBatch::new(tensor(v.clone(), &vshape), tensor(a.clone(), &ashape));
    batch.visual_second = v2.clone().map(|x| tensor(x, &vshape));
    batch.audio_second = a2.clone().map(|x| tensor(x, &ashape));
    let naive = NaiveBatch {
        n,
        visual: v,
        audio: a,
        visual_second: v2,
        audio_second: a2,
    };
    (batch, naive)
}

/// Absolute difference scaled by magnitude once values exceed 1.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn all_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| close(x, y, tol))
}

/// A desk-architecture run small enough for the test suites: 32 pairs,
/// batches of 8, a handful of steps.
pub fn tiny_run(out_dir: &std::path::Path, steps: u64) -> cmac_core::trainer::RunConfig {
    cmac_core::trainer::RunConfig {
        out_dir: out_dir.to_path_buf(),
        steps: Some(steps),
        batch_size: 8,
        dataset_size: 32,
        bank_capacity: 24,
        ..Default::default()
    }
}
