//! Fast modular code against the loop-based references, as checks that
//! report instead of panicking.

use cmac_core::contrastive::{cl_loss, nce_loss, ContrastiveTerms};
use cmac_core::oracle::{
    brute_cl, brute_mse, brute_nce, naive_conv2d, naive_conv3d, naive_reference_pipeline, NaiveState, MICRO_MAX_PARAMS,
};
use cmac_core::tensor::{conv_nd, ConvSpec};
use cmac_core::{attention_consistency_loss, AttentionKind, AttentionMap, ContrastiveConfig, MemoryBank, Modality, Mode, Module};
use rand::Rng;

use super::checks::{check, Check};
use super::*;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn equivalence_checks() -> Vec<Check> {
    vec![
        check("conv vs loops", conv_equivalence),
        check("losses vs brute force", loss_equivalence),
        check("pipeline vs loop reference", pipeline_equivalence),
    ]
}

const TOL: f64 = 1e-10;

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|r| r.to_vec()).collect()
}

/// Convolutions against direct loops, 2-d and 3-d, 40 random cases.
pub fn conv_equivalence() -> Result<String, String> {
    let mut r = rng(11);
    for case in 0..40 {
        let rank = if case % 2 == 0 { 2 } else { 3 };
        let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let kernel: Vec<usize> = (0..rank).map(|_| r.random_range(1..=3)).collect();
        let stride: Vec<usize> = (0..rank).map(|_| r.random_range(1..=2)).collect();
        let pad: Vec<usize> = (0..rank).map(|_| r.random_range(0..=1)).collect();
        let dims: Vec<usize> = (0..rank).map(|a| r.random_range(kernel[a].max(2)..=6)).collect();
        let xs: Vec<usize> = [n, ci].iter().chain(&dims).copied().collect();
        let ws: Vec<usize> = [co, ci].iter().chain(&kernel).copied().collect();
        let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
        let w = uniform(&mut r, ws.iter().product(), -1.0, 1.0);
        let b = uniform(&mut r, co, -1.0, 1.0);
        let fast = conv_nd(&tensor(x.clone(), &xs), &tensor(w.clone(), &ws), Some(&tensor(b.clone(), &[co])), &ConvSpec::new(&stride, &pad))
            .map_err(err)?;
        let (slow, shape) = if rank == 2 {
            let (y, s) = naive_conv2d(&x, xs[..].try_into().map_err(err)?, &w, ws[..].try_into().map_err(err)?, Some(&b), [stride[0], stride[1]], [pad[0], pad[1]])
                .map_err(err)?;
            (y, s.to_vec())
        } else {
            let (y, s) = naive_conv3d(
                &x,
                xs[..].try_into().map_err(err)?,
                &w,
                ws[..].try_into().map_err(err)?,
                Some(&b),
                [stride[0], stride[1], stride[2]],
                [pad[0], pad[1], pad[2]],
            )
            .map_err(err)?;
            (y, s.to_vec())
        };
        ensure!(fast.shape() == &shape[..], "case {case}: shape {:?} vs {shape:?}", fast.shape());
        ensure!(all_close(&fast.to_vec(), &slow, 1e-12), "case {case}");
    }
    Ok("40 cases, ranks 2 and 3, within 1e-12".into())
}

/// NCE, cross-modal contrastive and consistency losses against explicit
/// sums, 60 random cases with N <= 8 and banks up to 64 entries.
pub fn loss_equivalence() -> Result<String, String> {
    let mut r = rng(5);
    for case in 0..60 {
        let n = r.random_range(1..=8);
        let d = r.random_range(2..=8);
        let cap = 64;
        let cfg = ContrastiveConfig {
            tau: r.random_range(0.05..1.0),
            use_within_modal_negatives: r.random_bool(0.5),
            use_within_modal_positives: r.random_bool(0.5),
            lambda: 1.0,
        };
        let anchors = unit_rows(&mut r, n, d);
        let cross = unit_rows(&mut r, n, d);
        let peer = unit_rows(&mut r, n, d);
        let second = unit_rows(&mut r, n, d);
        let mut cross_bank = MemoryBank::new(Modality::Audio, cap, d);
        let mut peer_bank = MemoryBank::new(Modality::Visual, cap, d);
        let fill_a = r.random_range(0..=cap + 10);
        let fill_v = r.random_range(0..=cap + 10);
        cross_bank.push(&unit_rows(&mut r, fill_a, d)).map_err(err)?;
        peer_bank.push(&unit_rows(&mut r, fill_v, d)).map_err(err)?;

        let ta = tensor(anchors.clone(), &[n, d]);
        let tc = tensor(cross.clone(), &[n, d]);
        let tp = tensor(peer.clone(), &[n, d]);
        let ts = tensor(second.clone(), &[n, d]);

        let fast = nce_loss(&ta, &tc, &cross_bank, cfg.tau).map_err(err)?.item();
        let slow = brute_nce(&rows(&anchors, d), &rows(&cross, d), &rows(&cross_bank.entries(), d), cfg.tau);
        ensure!(close(fast, slow, TOL), "nce case {case}: {fast} vs {slow}");

        let terms = ContrastiveTerms {
            anchor_modality: Modality::Visual,
            anchors: &ta,
            cross_keys: &tc,
            cross_bank: &cross_bank,
            peer_keys: &tp,
            peer_bank: &peer_bank,
            second_view: Some(&ts),
        };
        let fast = cl_loss(&terms, &cfg).map_err(err)?.item();
        let slow = brute_cl(
            &rows(&anchors, d),
            &rows(&cross, d),
            &rows(&cross_bank.entries(), d),
            &rows(&peer, d),
            &rows(&peer_bank.entries(), d),
            Some(&rows(&second, d)),
            &cfg,
        );
        ensure!(close(fast, slow, TOL), "cl case {case} {cfg:?}: {fast} vs {slow}");

        let s = uniform(&mut r, n * 6, 0.0, 1.0);
        let sh = uniform(&mut r, n * 6, 0.0, 1.0);
        let map = |v: Vec<f64>, kind| AttentionMap {
            values: tensor(v, &[n, 2, 3]),
            kind,
        };
        let fast = attention_consistency_loss(&map(s.clone(), AttentionKind::Guided), &map(sh.clone(), AttentionKind::Predicted), true)
            .map_err(err)?
            .item();
        ensure!(close(fast, brute_mse(&s, &sh), TOL), "mse case {case}");
    }
    Ok(format!("60 cases: nce, cl (all flag combinations), mse within {TOL:e}"))
}

/// The modular forward pass against the loop reference on 10 random
/// micro-configurations.
pub fn pipeline_equivalence() -> Result<String, String> {
    let mut r = rng(2024);
    for case in 0..10 {
        let cfg = random_micro_config(&mut r);
        let mut model = scrambled_model(&cfg, &mut r);
        let n = r.random_range(2..=4);
        let (batch, naive) = random_batch(&cfg, n, &mut r);
        let mode = if case % 3 == 2 { Mode::Eval } else { Mode::Train };
        let state = NaiveState::from_model(&model);
        let slow = naive_reference_pipeline(&cfg, &state, &naive, mode).map_err(err)?;
        let fast = model.forward(&batch, mode).map_err(err)?;

        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let what = format!("case {case}: {cfg:?} n={n} {mode:?}");
        ensure!(all_close(&fast.s_v.values.to_vec(), &flat(&slow.s_v), TOL), "s_v {what}");
        ensure!(all_close(&fast.s_a.values.to_vec(), &flat(&slow.s_a), TOL), "s_a {what}");
        ensure!(all_close(&fast.s_hat_v.values.to_vec(), &flat(&slow.s_hat_v), TOL), "s_hat_v {what}");
        ensure!(all_close(&fast.s_hat_a.values.to_vec(), &flat(&slow.s_hat_a), TOL), "s_hat_a {what}");
        ensure!(all_close(&fast.filters.kappa_v.to_vec(), &flat(&slow.kappa_v), TOL), "kappa_v {what}");
        ensure!(all_close(&fast.filters.kappa_a.to_vec(), &flat(&slow.kappa_a), TOL), "kappa_a {what}");
        ensure!(all_close(&fast.keys_v, &flat(&slow.keys_v), TOL), "keys_v {what}");
        ensure!(all_close(&fast.keys_a, &flat(&slow.keys_a), TOL), "keys_a {what}");
        let b = fast.breakdown;
        let l = slow.losses;
        for (name, x, y) in [
            ("cl_va", b.cl_va, l.cl_va),
            ("cl_av", b.cl_av, l.cl_av),
            ("ac_v", b.ac_v, l.ac_v),
            ("ac_a", b.ac_a, l.ac_a),
            ("total", b.total, l.total),
        ] {
            ensure!(close(x, y, TOL), "{name} {what}: {x} vs {y}");
        }
        ensure!(model.num_parameters() <= MICRO_MAX_PARAMS, "case {case}: not micro-scale");
    }
    Ok(format!("10 micro-configs, train and eval modes, maps/filters/keys/losses within {TOL:e}"))
}
