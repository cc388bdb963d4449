//! One-axis ablation sweeps: train + evaluate per value, emit a table.

use std::fs;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{eval_localization, linear_probe, LocalizationReport, ProbeConfig};
use super::{train, RunConfig};
use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    NormMode,
    Scales,
    /// `none`, `neg`, `pos` or `neg+pos` within-modal sampling.
    SamplingPolicy,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "norm_mode" | "norm-mode" => Ok(SweepAxis::NormMode),
            "scales" => Ok(SweepAxis::Scales),
            "sampling_policy" | "sampling-policy" => Ok(SweepAxis::SamplingPolicy),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::NormMode => "norm_mode",
            SweepAxis::Scales => "scales",
            SweepAxis::SamplingPolicy => "sampling_policy",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = || Error::Config(format!("bad {} value {value:?}", self.name()));
        match self {
            SweepAxis::Lambda => cfg.lambda = value.parse().map_err(|_| bad())?,
            SweepAxis::NormMode => cfg.norm_mode = value.parse()?,
            SweepAxis::Scales => cfg.scales = value.parse().map_err(|_| bad())?,
            SweepAxis::SamplingPolicy => {
                let (neg, pos) = match value {
                    "none" => (false, false),
                    "neg" => (true, false),
                    "pos" => (false, true),
                    "neg+pos" => (true, true),
                    _ => return Err(bad()),
                };
                cfg.within_modal_negatives = neg;
                cfg.within_modal_positives = pos;
            }
        }
        cfg.out_dir = base.out_dir.join(format!("{}={}", self.name(), value.replace('+', "_")));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub iterations_per_epoch: u64,
    pub steps: u64,
    pub final_total: f64,
    pub final_cl: f64,
    pub final_ac: f64,
    pub probe_visual: f64,
    pub probe_audio: f64,
    pub localization: LocalizationReport,
}

/// Held-out pairs for probes and localization, disjoint in seed from the
/// training set.
pub fn held_out(cfg: &RunConfig, size: usize) -> Result<Dataset> {
    Dataset::generate(&cfg.data, size, derive_seed(cfg.data_seed, 0x7E57))
}

/// Train and evaluate once per value; writes `sweep.jsonl` and `sweep.tsv`
/// under `base.out_dir`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String], probe: &ProbeConfig, eval_size: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        log::info!("sweep {}={value}", axis.name());
        let (mut trainer, records) = train(cfg)?;
        let last = records.last().cloned().ok_or_else(|| Error::Contract("sweep run made no steps".into()))?;
        let test = held_out(cfg, eval_size)?;
        let model = &mut trainer.model;
        let pv = linear_probe(model, Modality::Visual, &trainer.dataset, &test, probe)?;
        let pa = linear_probe(model, Modality::Audio, &trainer.dataset, &test, probe)?;
        let loc = eval_localization(model, &test, 32)?;
        rows.push(SweepRow {
            axis,
            value: value.clone(),
            iterations_per_epoch: cfg.iterations_per_epoch(),
            steps: last.step,
            final_total: last.total,
            final_cl: last.cl_va + last.cl_av,
            final_ac: last.ac_v + last.ac_a,
            probe_visual: pv.test_accuracy,
            probe_audio: pa.test_accuracy,
            localization: loc,
        });
    }
    fs::create_dir_all(&base.out_dir)?;
    let mut jl = fs::File::create(base.out_dir.join("sweep.jsonl"))?;
    let mut tsv = fs::File::create(base.out_dir.join("sweep.tsv"))?;
    writeln!(
        tsv,
        "axis\tvalue\titer_per_epoch\tsteps\tfinal_total\tfinal_cl\tfinal_ac\tprobe_visual\tprobe_audio\tmass_ratio_v\tpointing_v\tchance_v"
    )?;
    for r in &rows {
        serde_json::to_writer(&mut jl, r)?;
        jl.write_all(b"\n")?;
        let v = r.localization.visual_guided;
        writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.axis.name(),
            r.value,
            r.iterations_per_epoch,
            r.steps,
            r.final_total,
            r.final_cl,
            r.final_ac,
            r.probe_visual,
            r.probe_audio,
            v.mass_ratio,
            v.pointing,
            v.chance
        )?;
    }
    Ok(rows)
}
