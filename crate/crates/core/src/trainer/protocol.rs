//! The desk-scale learning-signal protocol: per seed, evaluate an untrained
//! model, then train with the consistency term on (`lambda_on`) and off
//! (λ = 0), and compare medians across seeds against pinned thresholds.

use serde::{Deserialize, Serialize};

use super::eval::{eval_localization, linear_probe, ProbeConfig};
use super::sweep::held_out;
use super::{train, RunConfig, Trainer};
use crate::error::{Error, Result};
use crate::Modality;

/// Pass thresholds, pinned in the repository.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalThresholds {
    /// Minimum visual probe gain over the untrained encoder, in accuracy
    /// (0.15 = 15 points).
    pub probe_gain: f64,
    /// Allowed visual probe shortfall against the λ = 0 run.
    pub ablation_slack: f64,
    /// Minimum guided visual in-region mass ratio after training.
    pub mass_ratio: f64,
    /// Range the untrained model's mass ratio must fall in.
    pub untrained_ratio: (f64, f64),
    /// Minimum guided visual pointing accuracy as a multiple of chance.
    pub pointing_over_chance: f64,
}

impl Default for SignalThresholds {
    fn default() -> Self {
        SignalThresholds {
            probe_gain: 0.15,
            ablation_slack: 0.01,
            mass_ratio: 1.5,
            untrained_ratio: (0.8, 1.2),
            pointing_over_chance: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalProtocol {
    pub seeds: Vec<u64>,
    /// Steps per training run; `None` keeps the configured epoch count.
    pub steps: Option<u64>,
    pub lambda_on: f64,
    pub eval_size: usize,
    pub probe: ProbeConfig,
    pub thresholds: SignalThresholds,
}

impl SignalProtocol {
    /// Five seeds at the configured run length (about 2000 steps).
    pub fn full() -> Self {
        SignalProtocol {
            seeds: (0..5).collect(),
            steps: None,
            lambda_on: 1.5,
            eval_size: 256,
            probe: ProbeConfig::default(),
            thresholds: SignalThresholds::default(),
        }
    }

    /// Three seeds of 200 steps: same measurements, same thresholds.
    pub fn reduced() -> Self {
        SignalProtocol {
            seeds: (0..3).collect(),
            steps: Some(200),
            ..Self::full()
        }
    }
}

/// Measurements of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSignal {
    pub seed: u64,
    pub steps: u64,
    pub untrained_probe: f64,
    pub untrained_ratio: f64,
    pub untrained_pointing: f64,
    pub probe: f64,
    pub ablation_probe: f64,
    pub ratio: f64,
    pub pointing: f64,
    pub chance: f64,
    pub first_total: f64,
    pub last_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    pub protocol: SignalProtocol,
    pub seeds: Vec<SeedSignal>,
    pub checks: Vec<SignalCheck>,
}

impl SignalReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run the protocol from `base`, writing each run under `base.out_dir`.
pub fn learning_signal(base: &RunConfig, protocol: &SignalProtocol) -> Result<SignalReport> {
    if protocol.seeds.is_empty() {
        return Err(Error::Config("learning-signal protocol needs at least one seed".into()));
    }
    let mut seeds = Vec::new();
    for &seed in &protocol.seeds {
        let run = |lambda: f64, tag: &str| RunConfig {
            seed,
            lambda,
            steps: protocol.steps.or(base.steps),
            out_dir: base.out_dir.join(format!("seed{seed}_{tag}")),
            ..base.clone()
        };
        let on = run(protocol.lambda_on, "cmac");
        on.validate()?;
        let test = held_out(&on, protocol.eval_size)?;

        let mut fresh = Trainer::new(&on)?;
        let untrained_probe = linear_probe(&mut fresh.model, Modality::Visual, &fresh.dataset, &test, &protocol.probe)?;
        let untrained_loc = eval_localization(&mut fresh.model, &test, 32)?.visual_guided;

        log::info!("learning signal: seed {seed}, lambda {}", protocol.lambda_on);
        let (mut t, records) = train(&on)?;
        let probe = linear_probe(&mut t.model, Modality::Visual, &t.dataset, &test, &protocol.probe)?;
        let loc = eval_localization(&mut t.model, &test, 32)?.visual_guided;

        log::info!("learning signal: seed {seed}, lambda 0");
        let (mut t0, _) = train(&run(0.0, "lambda0"))?;
        let ablation = linear_probe(&mut t0.model, Modality::Visual, &t0.dataset, &test, &protocol.probe)?;

        seeds.push(SeedSignal {
            seed,
            steps: records.len() as u64,
            untrained_probe: untrained_probe.test_accuracy,
            untrained_ratio: untrained_loc.mass_ratio,
            untrained_pointing: untrained_loc.pointing,
            probe: probe.test_accuracy,
            ablation_probe: ablation.test_accuracy,
            ratio: loc.mass_ratio,
            pointing: loc.pointing,
            chance: loc.chance,
            first_total: records.first().map_or(f64::NAN, |r| r.total),
            last_total: records.last().map_or(f64::NAN, |r| r.total),
        });
    }
    let checks = evaluate(&seeds, &protocol.thresholds);
    Ok(SignalReport {
        protocol: protocol.clone(),
        seeds,
        checks,
    })
}

/// Compare per-seed medians against the thresholds.
pub fn evaluate(seeds: &[SeedSignal], th: &SignalThresholds) -> Vec<SignalCheck> {
    let m = |f: fn(&SeedSignal) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    let (untrained, probe, ablation) = (m(|s| s.untrained_probe), m(|s| s.probe), m(|s| s.ablation_probe));
    let (u_ratio, ratio) = (m(|s| s.untrained_ratio), m(|s| s.ratio));
    let (pointing, chance) = (m(|s| s.pointing), m(|s| s.chance));
    let (first, last) = (m(|s| s.first_total), m(|s| s.last_total));
    let check = |name: &str, passed: bool, detail: String| SignalCheck {
        name: name.into(),
        passed,
        detail,
    };
    vec![
        check(
            "probe_gain",
            probe - untrained >= th.probe_gain,
            format!("visual probe {probe:.3} vs untrained {untrained:.3} (need +{:.2})", th.probe_gain),
        ),
        check(
            "ablation_order",
            probe >= ablation - th.ablation_slack,
            format!("visual probe {probe:.3} vs lambda=0 {ablation:.3} (slack {:.2})", th.ablation_slack),
        ),
        check(
            "mass_ratio",
            ratio > th.mass_ratio && (th.untrained_ratio.0..=th.untrained_ratio.1).contains(&u_ratio),
            format!(
                "guided visual mass ratio {ratio:.3} (need > {:.2}); untrained {u_ratio:.3} (need in [{:.2}, {:.2}])",
                th.mass_ratio, th.untrained_ratio.0, th.untrained_ratio.1
            ),
        ),
        check(
            "pointing",
            pointing >= th.pointing_over_chance * chance,
            format!(
                "guided visual pointing {pointing:.3} = {:.2}x chance {chance:.3} (need {:.1}x)",
                pointing / chance,
                th.pointing_over_chance
            ),
        ),
        check(
            "loss_decrease",
            last < first,
            format!("total loss first step {first:.4} -> last step {last:.4}"),
        ),
    ]
}
