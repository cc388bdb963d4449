//! Finite-difference checks for every differentiable operation and for the
//! full objective of randomized micro-models.

use cmac_core::contrastive::{cl_loss, nce_loss, ContrastiveTerms};
use cmac_core::oracle::{finite_diff_grad, gradcheck_model, max_relative_error, FD_STEP};
use cmac_core::pcf::{guided_attention, make_filters, pyramid_attention};
use cmac_core::tensor::{
    batch_norm, conv_nd, correlate, cosine_similarity, downsample_avg2, global_avg_pool, l2_normalize_rows, linear,
    masked_cross_entropy, upsample_nearest, BatchStats, ConvSpec,
};
use cmac_core::{
    attention_consistency_loss, AttentionKind, AttentionMap, ContrastiveConfig, MemoryBank, Modality, NormMode, PcfConfig,
    Result, Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_batch, random_micro_config, rng, scrambled_model, uniform, unit_rows};

pub const INSTANCES: usize = 20;
pub const THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct OpResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_error < THRESHOLD
    }
}

/// Inputs of one instance: shapes and values.
type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
type Build = dyn Fn(&[Tensor]) -> Result<Tensor>;

fn input(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), uniform(r, shape.iter().product(), lo, hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    (shape.to_vec(), v)
}

/// Contract the output with fixed random weights so every output element
/// contributes to a scalar.
fn contract(out: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let n = out.numel();
    out.reshape(&[n])?.mul(&Tensor::new(weights.to_vec(), &[n])?).map(|t| t.sum())
}

fn check_instance(inputs: &Inputs, build: &Build, r: &mut ChaCha8Rng) -> Result<f64> {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(s, v)| Tensor::parameter(v.clone(), s))
        .collect::<Result<_>>()?;
    let out = build(&leaves)?;
    let weights = uniform(r, out.numel(), -1.0, 1.0);
    contract(&out, &weights)?.backward()?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let theta: Vec<f64> = inputs.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let numeric = finite_diff_grad(
        |t| {
            let mut offset = 0;
            let mut tensors = Vec::with_capacity(inputs.len());
            for (s, v) in inputs {
                tensors.push(Tensor::new(t[offset..offset + v.len()].to_vec(), s)?);
                offset += v.len();
            }
            Ok(contract(&build(&tensors)?, &weights)?.item())
        },
        &theta,
        FD_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn run(name: &str, seed: u64, instances: usize, gen: impl Fn(&mut ChaCha8Rng) -> Inputs, build: &Build) -> OpResult {
    let mut r = rng(seed);
    let mut max_error = 0.0f64;
    for _ in 0..instances {
        let inputs = gen(&mut r);
        let e = check_instance(&inputs, build, &mut r).unwrap_or_else(|e| panic!("{name}: {e}"));
        max_error = max_error.max(e);
    }
    OpResult {
        name: name.to_string(),
        instances,
        max_error,
    }
}

fn shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = r.random_range(1..=3);
    (0..rank).map(|_| r.random_range(1..=4)).collect()
}

fn fmap_shape(r: &mut ChaCha8Rng, rank: usize, min: usize) -> Vec<usize> {
    let mut s = vec![r.random_range(1..=3), r.random_range(1..=3)];
    s.extend((0..rank).map(|_| r.random_range(min..=min + 3)));
    s
}

fn map(t: &Tensor, kind: AttentionKind) -> AttentionMap {
    AttentionMap {
        values: t.clone(),
        kind,
    }
}

/// Every elementwise, reduction, layout, network and loss operation.
pub fn op_suite(instances: usize) -> Vec<OpResult> {
    let mut out = Vec::new();
    let n = instances;

    let unary = |f: fn(&Tensor) -> Tensor| move |x: &[Tensor]| Ok(f(&x[0]));
    let one = |r: &mut ChaCha8Rng| {
        let s = shape(r);
        vec![input(r, &s, -2.0, 2.0)]
    };
    let two = |r: &mut ChaCha8Rng| {
        let s = shape(r);
        vec![input(r, &s, -2.0, 2.0), input(r, &s, -2.0, 2.0)]
    };
    out.push(run("add", 1, n, two, &|x| x[0].add(&x[1])));
    out.push(run("sub", 2, n, two, &|x| x[0].sub(&x[1])));
    out.push(run("mul", 3, n, two, &|x| x[0].mul(&x[1])));
    out.push(run("scale", 4, n, one, &|x| Ok(x[0].scale(-1.7))));
    out.push(run("add_scalar", 5, n, one, &|x| Ok(x[0].add_scalar(0.3))));
    out.push(run("exp", 6, n, one, &unary(Tensor::exp)));
    out.push(run(
        "log",
        7,
        n,
        |r| {
            let s = shape(r);
            vec![input(r, &s, 0.2, 3.0)]
        },
        &unary(Tensor::log),
    ));
    out.push(run("sigmoid", 8, n, one, &unary(Tensor::sigmoid)));
    out.push(run(
        "relu",
        9,
        n,
        |r| {
            let s = shape(r);
            vec![off_zero(r, &s)]
        },
        &unary(Tensor::relu),
    ));
    out.push(run("square", 10, n, one, &unary(Tensor::square)));
    out.push(run(
        "clamp",
        11,
        n,
        |r| {
            // Keep clear of the bounds at +-0.5.
            let s = shape(r);
            let (s, v) = off_zero(r, &s);
            vec![(s, v.iter().map(|x| if x.abs() < 0.45 { *x } else { x * 1.2 + x.signum() * 0.1 }).collect())]
        },
        &|x| Ok(x[0].clamp(-0.5, 0.5)),
    ));
    out.push(run(
        "softmax",
        12,
        n,
        |r| {
            let s = vec![r.random_range(1..=3), r.random_range(1..=5)];
            vec![input(r, &s, -3.0, 3.0)]
        },
        &|x| x[0].softmax(1),
    ));
    out.push(run(
        "softmax_axis0",
        13,
        n,
        |r| {
            let s = vec![r.random_range(1..=5), r.random_range(1..=3), 2];
            vec![input(r, &s, -3.0, 3.0)]
        },
        &|x| x[0].softmax(0),
    ));
    out.push(run("sum", 14, n, one, &|x| Ok(x[0].sum())));
    out.push(run("mean", 15, n, one, &|x| Ok(x[0].mean())));
    out.push(run(
        "reshape",
        16,
        n,
        |r| {
            let s = vec![r.random_range(1..=3), 4];
            vec![input(r, &s, -1.0, 1.0)]
        },
        &|x| {
            let rows = x[0].shape()[0];
            x[0].reshape(&[2, rows * 2])?.square().reshape(&[rows * 4])
        },
    ));
    out.push(run(
        "cat0",
        17,
        n,
        |r| {
            let tail = r.random_range(1..=3);
            let rows = r.random_range(1..=3);
            vec![input(r, &[rows, tail], -1.0, 1.0), input(r, &[2, tail], -1.0, 1.0)]
        },
        &|x| Ok(Tensor::cat0(&[x[0].square(), x[1].clone()])?.exp()),
    ));

    for rank in 1..=3 {
        out.push(run(
            &format!("conv{rank}d"),
            20 + rank as u64,
            n,
            move |r| {
                let (b, ci, co) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2));
                let kernel: Vec<usize> = (0..rank).map(|_| r.random_range(1..=3)).collect();
                let dims: Vec<usize> = kernel.iter().map(|&k| r.random_range(k.max(2)..=4)).collect();
                let xs: Vec<usize> = [b, ci].iter().chain(&dims).copied().collect();
                let ws: Vec<usize> = [co, ci].iter().chain(&kernel).copied().collect();
                vec![input(r, &xs, -1.0, 1.0), input(r, &ws, -1.0, 1.0), input(r, &[co], -1.0, 1.0)]
            },
            &move |x| {
                let rank = x[0].rank() - 2;
                let stride: Vec<usize> = (0..rank).map(|a| 1 + (a % 2)).collect();
                let pad: Vec<usize> = (0..rank).map(|a| (a + 1) % 2).collect();
                conv_nd(&x[0], &x[1], Some(&x[2]), &ConvSpec::new(&stride, &pad))
            },
        ));
    }
    out.push(run(
        "batch_norm",
        30,
        n,
        |r| {
            let s = fmap_shape(r, 2, 2);
            let c = s[1];
            vec![input(r, &s, -2.0, 2.0), input(r, &[c], 0.5, 1.5), input(r, &[c], -0.5, 0.5)]
        },
        &|x| Ok(batch_norm(&x[0], &x[1], &x[2], &BatchStats::Batch, 1e-5)?.0),
    ));
    out.push(run(
        "batch_norm_fixed",
        31,
        n,
        |r| {
            let s = fmap_shape(r, 1, 2);
            let c = s[1];
            vec![input(r, &s, -2.0, 2.0), input(r, &[c], 0.5, 1.5), input(r, &[c], -0.5, 0.5)]
        },
        &|x| {
            let c = x[1].numel();
            let stats = BatchStats::Fixed {
                mean: (0..c).map(|i| 0.1 * i as f64).collect(),
                var: (0..c).map(|i| 0.5 + 0.2 * i as f64).collect(),
            };
            Ok(batch_norm(&x[0], &x[1], &x[2], &stats, 1e-5)?.0)
        },
    ));
    out.push(run(
        "global_avg_pool",
        32,
        n,
        |r| {
            let rank = r.random_range(1..=3);
            let s = fmap_shape(r, rank, 1);
            vec![input(r, &s, -1.0, 1.0)]
        },
        &|x| global_avg_pool(&x[0]),
    ));
    out.push(run(
        "downsample_avg2",
        33,
        n,
        |r| {
            let rank = r.random_range(1..=3);
            let s = fmap_shape(r, rank, 2);
            vec![input(r, &s, -1.0, 1.0)]
        },
        &|x| downsample_avg2(&x[0]),
    ));
    out.push(run(
        "upsample_nearest",
        34,
        n,
        |r| {
            let rank = r.random_range(1..=3);
            let s = fmap_shape(r, rank, 1);
            vec![input(r, &s, -1.0, 1.0)]
        },
        &|x| {
            let target: Vec<usize> = x[0].shape()[2..].iter().map(|d| 2 * d + 1).collect();
            upsample_nearest(&x[0], 2, &target)
        },
    ));
    out.push(run(
        "linear",
        35,
        n,
        |r| {
            let (b, i, o) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
            vec![input(r, &[b, i], -1.0, 1.0), input(r, &[o, i], -1.0, 1.0), input(r, &[o], -1.0, 1.0)]
        },
        &|x| linear(&x[0], &x[1], Some(&x[2])),
    ));
    out.push(run(
        "linear_no_bias",
        36,
        n,
        |r| {
            let (b, i, o) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
            vec![input(r, &[b, i], -1.0, 1.0), input(r, &[o, i], -1.0, 1.0)]
        },
        &|x| linear(&x[0], &x[1], None),
    ));
    out.push(run(
        "l2_normalize_rows",
        37,
        n,
        |r| {
            let s = [r.random_range(1..=4), r.random_range(2..=5)];
            vec![input(r, &s, -1.0, 1.0)]
        },
        &|x| Ok(l2_normalize_rows(&x[0], 1e-12)?.0),
    ));
    for (cosine, seed) in [(true, 38), (false, 39)] {
        out.push(run(
            if cosine { "correlate_cosine" } else { "correlate_dot" },
            seed,
            n,
            |r| {
                let rank = r.random_range(1..=3);
                let s = fmap_shape(r, rank, 1);
                vec![input(r, &s[..2], -1.0, 1.0), input(r, &s, -1.0, 1.0)]
            },
            &move |x| correlate(&x[0], &x[1], cosine),
        ));
    }
    out.push(run(
        "cosine_similarity",
        40,
        n,
        |r| {
            let d = r.random_range(2..=6);
            vec![input(r, &[d], -1.0, 1.0), input(r, &[d], -1.0, 1.0)]
        },
        &|x| cosine_similarity(&x[0], &x[1]),
    ));
    out.push(run(
        "masked_cross_entropy",
        41,
        n,
        |r| {
            let (rows, cols) = (r.random_range(1..=4), r.random_range(5..=8));
            vec![input(r, &[rows, cols], -3.0, 3.0)]
        },
        &|x| {
            let (rows, cols) = (x[0].shape()[0], x[0].shape()[1]);
            let targets: Vec<usize> = (0..rows).collect();
            let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols != (i / cols + 4) % cols).collect();
            masked_cross_entropy(&x[0], &targets, Some(&mask))
        },
    ));

    for (mode, seed) in [(NormMode::Cosine, 50), (NormMode::Softmax, 51), (NormMode::None, 52)] {
        for scales in 1..=3 {
            out.push(run(
                &format!("pyramid_attention_{mode:?}_x{scales}").to_lowercase(),
                seed * 10 + scales as u64,
                n,
                |r| {
                    let rank = r.random_range(2..=3);
                    let s = fmap_shape(r, rank, 4);
                    // The clamp of `None` mode has kinks at 0 and 1; keep
                    // raw dot products small and mostly inside.
                    let (lo, hi) = if mode == NormMode::None { (0.05, 0.4) } else { (-1.0, 1.0) };
                    vec![input(r, &s[..2], lo, hi), input(r, &s, lo, hi)]
                },
                &move |x| Ok(pyramid_attention(&x[0], &x[1], &PcfConfig { mode, scales })?.values),
            ));
        }
    }
    out.push(run(
        "guided_attention",
        60,
        n,
        |r| {
            let (b, c) = (r.random_range(1..=3), r.random_range(1..=3));
            vec![input(r, &[b, c, 2, 4, 4], -1.0, 1.0), input(r, &[b, c, 4, 2], -1.0, 1.0)]
        },
        &|x| {
            let filters = make_filters(&x[0], &x[1])?;
            let (s_v, s_a) = guided_attention(&x[0], &x[1], &filters, &PcfConfig::default())?;
            let flat = |t: &Tensor| t.reshape(&[t.numel()]);
            Tensor::cat0(&[flat(&s_v.values)?, flat(&s_a.values)?])
        },
    ));
    out.push(run(
        "attention_consistency",
        61,
        n,
        |r| {
            let s = vec![r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4)];
            vec![input(r, &s, 0.0, 1.0), input(r, &s, 0.0, 1.0)]
        },
        &|x| attention_consistency_loss(&map(&x[0], AttentionKind::Guided), &map(&x[1], AttentionKind::Predicted), false),
    ));
    // With detached guidance the guided map is a constant target, so only
    // the predicted map is an input.
    out.push(run(
        "attention_consistency_detached",
        62,
        n,
        |r| {
            let s = vec![r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4)];
            vec![input(r, &s, 0.0, 1.0)]
        },
        &|x| {
            let target = Tensor::new(uniform(&mut rng(x[0].numel() as u64), x[0].numel(), 0.0, 1.0), x[0].shape())?;
            attention_consistency_loss(&map(&target, AttentionKind::Guided), &map(&x[0], AttentionKind::Predicted), true)
        },
    ));

    let embed = |r: &mut ChaCha8Rng, rows: usize, d: usize| (vec![rows, d], unit_rows(r, rows, d));
    out.push(run(
        "nce_loss",
        70,
        n,
        move |r| {
            let (b, d) = (r.random_range(1..=4), r.random_range(2..=4));
            vec![embed(r, b, d)]
        },
        &|x| {
            // Keys and bank are constants: only the anchors carry gradient.
            let (b, d) = (x[0].shape()[0], x[0].shape()[1]);
            let mut kr = rng(b as u64 * 7 + d as u64);
            let keys = Tensor::new(unit_rows(&mut kr, b, d), &[b, d])?;
            let mut bank = MemoryBank::new(Modality::Audio, 6, d);
            bank.push(&unit_rows(&mut kr, 5, d))?;
            nce_loss(&x[0], &keys, &bank, 0.2)
        },
    ));
    for (neg, pos, seed) in [(false, false, 71), (true, false, 72), (false, true, 73), (true, true, 74)] {
        out.push(run(
            &format!("cl_loss_neg{}_pos{}", neg as u8, pos as u8),
            seed,
            n,
            move |r| {
                let (b, d) = (r.random_range(1..=4), r.random_range(2..=4));
                vec![embed(r, b, d)]
            },
            &move |x| {
                let (b, d) = (x[0].shape()[0], x[0].shape()[1]);
                let mut kr = rng(b as u64 * 13 + d as u64);
                let key = |kr: &mut ChaCha8Rng| Tensor::new(unit_rows(kr, b, d), &[b, d]);
                let (cross, peer, second) = (key(&mut kr)?, key(&mut kr)?, key(&mut kr)?);
                let mut cross_bank = MemoryBank::new(Modality::Audio, 6, d);
                let mut peer_bank = MemoryBank::new(Modality::Visual, 6, d);
                cross_bank.push(&unit_rows(&mut kr, 4, d))?;
                peer_bank.push(&unit_rows(&mut kr, 3, d))?;
                let cfg = ContrastiveConfig {
                    tau: 0.3,
                    use_within_modal_negatives: neg,
                    use_within_modal_positives: pos,
                    lambda: 1.0,
                };
                cl_loss(
                    &ContrastiveTerms {
                        anchor_modality: Modality::Visual,
                        anchors: &x[0],
                        cross_keys: &cross,
                        cross_bank: &cross_bank,
                        peer_keys: &peer,
                        peer_bank: &peer_bank,
                        second_view: Some(&second),
                    },
                    &cfg,
                )
            },
        ));
    }
    out
}

/// Full objective of random micro-models (guidance not detached, so the
/// loss value and its autodiff gradient describe the same function).
pub fn objective_suite(instances: usize) -> OpResult {
    let mut r = rng(99);
    let mut max_error = 0.0f64;
    for _ in 0..instances {
        let mut cfg = random_micro_config(&mut r);
        cfg.detach_guidance = false;
        let mut model = scrambled_model(&cfg, &mut r);
        let n = r.random_range(2..=4);
        let (batch, _) = random_batch(&cfg, n, &mut r);
        let report = gradcheck_model(&mut model, &batch, FD_STEP).unwrap_or_else(|e| panic!("objective: {e}"));
        max_error = max_error.max(report.max_relative_error);
    }
    OpResult {
        name: "full_objective".into(),
        instances,
        max_error,
    }
}
