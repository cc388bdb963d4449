//! Invariant and degeneracy checks, each reporting pass/fail with a detail
//! line instead of panicking, so the acceptance summary can list them all.

use std::collections::VecDeque;

use cmac_core::contrastive::{cl_loss, nce_loss, ContrastiveTerms};
use cmac_core::pcf::{correlate_filter, normalize_response, pyramid_attention};
use cmac_core::tensor::{conv_nd, ConvSpec};
use cmac_core::{predict_attention, ContrastiveConfig, MemoryBank, Modality, Mode, Module, NormMode, PcfConfig, SaliencyHead, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_batch, random_micro_config, rng, scrambled_model, uniform, unit_rows};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const MODES: [NormMode; 3] = [NormMode::Cosine, NormMode::Softmax, NormMode::None];

/// Guided maps in all three modes (and predicted maps) stay inside [0, 1]
/// for arbitrary filters and feature maps, including zeros and large
/// magnitudes.
pub fn attention_range() -> Result<String, String> {
    let strategy = (
        0usize..3,
        1usize..=3,
        2usize..=3,
        1usize..=3,
        1usize..=4,
        prop_oneof![Just(0.0), Just(1e-6), Just(1.0), Just(1e3)],
        any::<u64>(),
    );
    runner(1000)
        .run(&strategy, |(mode, scales, rank, n, c, magnitude, seed)| {
            let mut r = rng(seed);
            let grid: Vec<usize> = (0..rank).map(|_| r.random_range(4..=6)).collect();
            let shape: Vec<usize> = [n, c].iter().chain(&grid).copied().collect();
            let cells: usize = shape.iter().product();
            let filter = Tensor::new(uniform(&mut r, n * c, -magnitude - 1.0, magnitude + 1.0), &[n, c]).unwrap();
            let mut fm = uniform(&mut r, cells, -1.0, 1.0);
            fm.iter_mut().for_each(|v| *v *= magnitude);
            let fmap = Tensor::new(fm, &shape).unwrap();
            let cfg = PcfConfig {
                mode: MODES[mode],
                scales,
            };
            let s = pyramid_attention(&filter, &fmap, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let bad = s.values.to_vec().into_iter().find(|v| !(0.0..=1.0).contains(v));
            prop_assert!(bad.is_none(), "guided value {bad:?} in {:?}", cfg);

            let head = SaliencyHead::new(Modality::Visual, c, rank, seed).unwrap();
            let p = predict_attention(&fmap, &head).unwrap();
            let bad = p.values.to_vec().into_iter().find(|v| !(0.0..=1.0).contains(v));
            prop_assert!(bad.is_none(), "predicted value {bad:?}");
            Ok(())
        })
        .map_err(err)?;
    Ok("1000 random filters/maps, all three modes, scales 1-3".into())
}

/// Cosine mode ignores positive rescaling of the filter.
pub fn cosine_scale_invariance() -> Result<String, String> {
    let strategy = (1usize..=3, 1usize..=3, 0.01f64..100.0, any::<u64>());
    runner(200)
        .run(&strategy, |(scales, c, factor, seed)| {
            let mut r = rng(seed);
            let n = 2;
            let shape = [n, c, 4, 5, 4];
            let filter = uniform(&mut r, n * c, -1.0, 1.0);
            let fmap = Tensor::new(uniform(&mut r, shape.iter().product(), -1.0, 1.0), &shape).unwrap();
            let cfg = PcfConfig {
                mode: NormMode::Cosine,
                scales,
            };
            let base = pyramid_attention(&Tensor::new(filter.clone(), &[n, c]).unwrap(), &fmap, &cfg).unwrap();
            let scaled_f: Vec<f64> = filter.iter().map(|v| v * factor).collect();
            let scaled = pyramid_attention(&Tensor::new(scaled_f, &[n, c]).unwrap(), &fmap, &cfg).unwrap();
            let d = base
                .values
                .to_vec()
                .iter()
                .zip(scaled.values.to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            prop_assert!(d <= 1e-12, "difference {d:e} for factor {factor}");
            Ok(())
        })
        .map_err(err)?;
    Ok("200 random filters, factors in [0.01, 100], differences <= 1e-12".into())
}

fn grads_are_zero(model: &cmac_core::CmacModel, prefixes: &[&str]) -> Result<usize, String> {
    let mut checked = 0;
    for p in model.parameters() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            if let Some(g) = p.grad() {
                if let Some(v) = g.iter().find(|v| **v != 0.0) {
                    return Err(format!("{} has gradient entry {v:e}", p.name));
                }
            }
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(format!("no parameters matched {prefixes:?}"));
    }
    Ok(checked)
}

/// With detached guidance, the consistency terms send nothing into the
/// transforms that produce the guided maps.
pub fn guidance_stop_gradient() -> Result<String, String> {
    let mut r = rng(31);
    for case in 0..10 {
        let mut cfg = random_micro_config(&mut r);
        cfg.detach_guidance = true;
        let mut model = scrambled_model(&cfg, &mut r);
        let (batch, _) = random_batch(&cfg, 3, &mut r);
        let out = model.forward(&batch, Mode::Train).map_err(err)?;
        out.ac_v.add(&out.ac_a).map_err(err)?.backward().map_err(err)?;
        grads_are_zero(&model, &["g_v.", "g_a.", "proj_"]).map_err(|e| format!("case {case}: {e}"))?;
        // The predicted side does learn.
        let moved = model
            .parameters()
            .iter()
            .filter(|p| p.name.starts_with("h_"))
            .any(|p| p.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)));
        if !moved {
            return Err(format!("case {case}: saliency heads received no gradient"));
        }
    }
    Ok("10 micro-models: transform and projection gradients exactly 0".into())
}

/// With lambda = 0 the saliency heads get exactly zero gradient.
pub fn lambda_zero_heads() -> Result<String, String> {
    let mut r = rng(32);
    for case in 0..10 {
        let mut cfg = random_micro_config(&mut r);
        cfg.contrastive.lambda = 0.0;
        let mut model = scrambled_model(&cfg, &mut r);
        let (batch, _) = random_batch(&cfg, 3, &mut r);
        model.forward(&batch, Mode::Train).map_err(err)?.total.backward().map_err(err)?;
        grads_are_zero(&model, &["h_v.", "h_a."]).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok("10 micro-models: saliency head gradients exactly 0".into())
}

/// Momentum targets never receive gradient.
pub fn momentum_targets_frozen() -> Result<String, String> {
    let mut r = rng(33);
    for case in 0..10 {
        let cfg = random_micro_config(&mut r);
        let mut model = scrambled_model(&cfg, &mut r);
        let (batch, _) = random_batch(&cfg, 3, &mut r);
        model.forward(&batch, Mode::Train).map_err(err)?.total.backward().map_err(err)?;
        for p in model.target_parameters() {
            if p.requires_grad() {
                return Err(format!("case {case}: target {} is trainable", p.name));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| *v != 0.0) {
                    return Err(format!("case {case}: target {} has gradient", p.name));
                }
            }
        }
    }
    Ok("10 micro-models: no target parameter carries gradient".into())
}

/// The ring buffer behaves like a bounded deque over random push sequences.
pub fn bank_fifo() -> Result<String, String> {
    let strategy = (0usize..=6, 1usize..=3, proptest::collection::vec(0usize..=9, 1..40), any::<u64>());
    runner(1000)
        .run(&strategy, |(capacity, dim, pushes, seed)| {
            let mut r = rng(seed);
            let mut bank = MemoryBank::new(Modality::Audio, capacity, dim);
            let mut model: VecDeque<Vec<f64>> = VecDeque::new();
            for k in pushes {
                let rows = unit_rows(&mut r, k, dim);
                bank.push(&rows).unwrap();
                for row in rows.chunks(dim) {
                    model.push_back(row.to_vec());
                    if model.len() > capacity {
                        model.pop_front();
                    }
                }
                let expect: Vec<f64> = model.iter().flatten().copied().collect();
                prop_assert_eq!(bank.len(), model.len());
                prop_assert_eq!(bank.entries(), expect);
            }
            Ok(())
        })
        .map_err(err)?;
    Ok("1000 random push sequences match a bounded deque".into())
}

fn cl_value(
    anchors: &[f64],
    cross: &[f64],
    cross_bank: &MemoryBank,
    peer: &[f64],
    peer_bank: &MemoryBank,
    n: usize,
    d: usize,
    cfg: &ContrastiveConfig,
) -> f64 {
    let t = |v: &[f64]| Tensor::new(v.to_vec(), &[n, d]).unwrap();
    let (a, c, p) = (t(anchors), t(cross), t(peer));
    cl_loss(
        &ContrastiveTerms {
            anchor_modality: Modality::Visual,
            anchors: &a,
            cross_keys: &c,
            cross_bank,
            peer_keys: &p,
            peer_bank,
            second_view: None,
        },
        cfg,
    )
    .unwrap()
    .item()
}

/// Reordering negatives (bank entries, or the batch as a whole) leaves the
/// loss unchanged.
pub fn negative_permutation() -> Result<String, String> {
    let mut r = rng(34);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (n, d, cap) = (r.random_range(1..=6), r.random_range(2..=5), 16);
        let cfg = ContrastiveConfig {
            tau: r.random_range(0.05..0.5),
            use_within_modal_negatives: r.random_bool(0.5),
            use_within_modal_positives: false,
            lambda: 1.0,
        };
        let anchors = unit_rows(&mut r, n, d);
        let cross = unit_rows(&mut r, n, d);
        let peer = unit_rows(&mut r, n, d);
        let fill = r.random_range(0..=cap);
        let cb_rows = unit_rows(&mut r, fill, d);
        let pb_rows = unit_rows(&mut r, fill, d);
        let bank = |m, rows: &[f64]| {
            let mut b = MemoryBank::new(m, cap, d);
            b.push(rows).unwrap();
            b
        };
        let base = cl_value(&anchors, &cross, &bank(Modality::Audio, &cb_rows), &peer, &bank(Modality::Visual, &pb_rows), n, d, &cfg);

        let shuffle_rows = |rows: &[f64], perm: &[usize]| perm.iter().flat_map(|&i| rows[i * d..(i + 1) * d].to_vec()).collect::<Vec<f64>>();
        let mut bank_perm: Vec<usize> = (0..fill).collect();
        bank_perm.shuffle(&mut r);
        let permuted_banks = cl_value(
            &anchors,
            &cross,
            &bank(Modality::Audio, &shuffle_rows(&cb_rows, &bank_perm)),
            &peer,
            &bank(Modality::Visual, &shuffle_rows(&pb_rows, &bank_perm)),
            n,
            d,
            &cfg,
        );
        let mut batch_perm: Vec<usize> = (0..n).collect();
        batch_perm.shuffle(&mut r);
        let permuted_batch = cl_value(
            &shuffle_rows(&anchors, &batch_perm),
            &shuffle_rows(&cross, &batch_perm),
            &bank(Modality::Audio, &cb_rows),
            &shuffle_rows(&peer, &batch_perm),
            &bank(Modality::Visual, &pb_rows),
            n,
            d,
            &cfg,
        );
        for v in [permuted_banks, permuted_batch] {
            let e = (v - base).abs() / base.abs().max(1.0);
            worst = worst.max(e);
        }
    }
    if worst > 1e-12 {
        return Err(format!("loss moved by {worst:e} under permutation"));
    }
    Ok(format!("200 cases, max relative change {worst:.1e}"))
}

/// Convolution is linear in its input.
pub fn conv_linearity() -> Result<String, String> {
    let strategy = (1usize..=3, -3.0f64..3.0, -3.0f64..3.0, any::<u64>());
    runner(200)
        .run(&strategy, |(rank, alpha, beta, seed)| {
            let mut r = rng(seed);
            let dims: Vec<usize> = (0..rank).map(|_| r.random_range(3..=5)).collect();
            let xs: Vec<usize> = [2, 2].iter().chain(&dims).copied().collect();
            let ks: Vec<usize> = [3, 2].iter().chain(&vec![3; rank]).copied().collect();
            let len: usize = xs.iter().product();
            let (x, y) = (uniform(&mut r, len, -1.0, 1.0), uniform(&mut r, len, -1.0, 1.0));
            let k = Tensor::new(uniform(&mut r, ks.iter().product(), -1.0, 1.0), &ks).unwrap();
            let spec = ConvSpec::new(&vec![1; rank], &vec![1; rank]);
            let conv = |v: &[f64]| conv_nd(&Tensor::new(v.to_vec(), &xs).unwrap(), &k, None, &spec).unwrap().to_vec();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = conv(&mix);
            let (cx, cy) = (conv(&x), conv(&y));
            for i in 0..lhs.len() {
                let rhs = alpha * cx[i] + beta * cy[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{} vs {}", lhs[i], rhs);
            }
            Ok(())
        })
        .map_err(err)?;
    Ok("200 random convolutions".into())
}

pub fn invariant_checks() -> Vec<Check> {
    vec![
        check("attention range in [0,1]", attention_range),
        check("cosine filter scale invariance", cosine_scale_invariance),
        check("stop-gradient into guidance", guidance_stop_gradient),
        check("lambda=0 leaves saliency heads untouched", lambda_zero_heads),
        check("momentum targets receive no gradient", momentum_targets_frozen),
        check("memory bank FIFO", bank_fifo),
        check("permutation invariance over negatives", negative_permutation),
        check("convolution linearity", conv_linearity),
    ]
}

/// With both within-modal switches off, the remoulded loss is plain NCE.
pub fn cl_reduces_to_nce() -> Result<String, String> {
    let mut r = rng(41);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, d) = (r.random_range(1..=8), r.random_range(2..=6));
        let tau = r.random_range(0.05..1.0);
        let anchors = Tensor::new(unit_rows(&mut r, n, d), &[n, d]).unwrap();
        let cross = Tensor::new(unit_rows(&mut r, n, d), &[n, d]).unwrap();
        let peer = Tensor::new(unit_rows(&mut r, n, d), &[n, d]).unwrap();
        let mut cb = MemoryBank::new(Modality::Audio, 64, d);
        let mut pb = MemoryBank::new(Modality::Visual, 64, d);
        let fill = r.random_range(0..=64);
        cb.push(&unit_rows(&mut r, fill, d)).unwrap();
        pb.push(&unit_rows(&mut r, fill, d)).unwrap();
        let cfg = ContrastiveConfig {
            tau,
            use_within_modal_negatives: false,
            use_within_modal_positives: false,
            lambda: 1.0,
        };
        let cl = cl_loss(
            &ContrastiveTerms {
                anchor_modality: Modality::Visual,
                anchors: &anchors,
                cross_keys: &cross,
                cross_bank: &cb,
                peer_keys: &peer,
                peer_bank: &pb,
                second_view: None,
            },
            &cfg,
        )
        .map_err(err)?
        .item();
        let nce = nce_loss(&anchors, &cross, &cb, tau).map_err(err)?.item();
        worst = worst.max((cl - nce).abs());
    }
    if worst > 1e-12 {
        return Err(format!("cl and nce differ by {worst:e}"));
    }
    Ok(format!("100 cases, max difference {worst:.1e}"))
}

/// One pyramid level is exactly the single-scale path.
pub fn single_scale_pyramid() -> Result<String, String> {
    let mut r = rng(42);
    for mode in MODES {
        for _ in 0..50 {
            let rank = r.random_range(1..=3);
            let (n, c) = (r.random_range(1..=3), r.random_range(1..=4));
            let shape: Vec<usize> = [n, c].iter().copied().chain((0..rank).map(|_| r.random_range(1..=5))).collect();
            let filter = Tensor::new(uniform(&mut r, n * c, -1.0, 1.0), &[n, c]).unwrap();
            let fmap = Tensor::new(uniform(&mut r, shape.iter().product(), -1.0, 1.0), &shape).unwrap();
            let pyr = pyramid_attention(&filter, &fmap, &PcfConfig { mode, scales: 1 }).map_err(err)?;
            let single = normalize_response(&correlate_filter(&filter, &fmap, mode).map_err(err)?, mode).map_err(err)?;
            if pyr.values.to_vec() != single.values.to_vec() || pyr.values.shape() != single.values.shape() {
                return Err(format!("{mode:?}: scales=1 differs from the single-scale response"));
            }
        }
    }
    Ok("150 cases over all modes, bitwise equal".into())
}

/// A single pair with empty banks has nothing to contrast: loss exactly 0.
pub fn trivial_batch_zero_loss() -> Result<String, String> {
    let mut r = rng(43);
    for _ in 0..50 {
        let d = r.random_range(2..=6);
        let t = |r: &mut rand_chacha::ChaCha8Rng| Tensor::new(unit_rows(r, 1, d), &[1, d]).unwrap();
        let (anchors, cross, peer, second) = (t(&mut r), t(&mut r), t(&mut r), t(&mut r));
        let cb = MemoryBank::new(Modality::Audio, 8, d);
        let pb = MemoryBank::new(Modality::Visual, 8, d);
        let nce = nce_loss(&anchors, &cross, &cb, 0.07).map_err(err)?.item();
        if nce != 0.0 {
            return Err(format!("nce = {nce:e}"));
        }
        for (neg, pos) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = ContrastiveConfig {
                tau: 0.07,
                use_within_modal_negatives: neg,
                use_within_modal_positives: pos,
                lambda: 1.0,
            };
            let cl = cl_loss(
                &ContrastiveTerms {
                    anchor_modality: Modality::Visual,
                    anchors: &anchors,
                    cross_keys: &cross,
                    cross_bank: &cb,
                    peer_keys: &peer,
                    peer_bank: &pb,
                    second_view: Some(&second),
                },
                &cfg,
            )
            .map_err(err)?
            .item();
            if cl != 0.0 {
                return Err(format!("cl (neg={neg}, pos={pos}) = {cl:e}"));
            }
        }
    }
    Ok("50 cases, every sampling policy exactly 0".into())
}

pub fn degeneracy_checks() -> Vec<Check> {
    vec![
        check("cl_loss with within-modal terms off equals nce_loss", cl_reduces_to_nce),
        check("pyramid with one scale equals the single-scale path", single_scale_pyramid),
        check("N=1 with empty banks gives zero loss", trivial_batch_zero_loss),
    ]
}
