//! `cmac` — train, inspect and evaluate cross-modal attention consistency
//! models on the synthetic audio-visual corpus.
//!
//! Every subcommand that builds a run starts from the defaults, applies the
//! optional `--config` file, then the `--set key=value` overrides, then the
//! dedicated flags, and validates the result before any compute. Exit status
//! is nonzero on any error, including a failed gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmac_core::oracle::{gradcheck_model, jitter_parameters, micro_config, random_av_batch, FD_STEP};
use cmac_core::trainer::{
    eval_localization, export_attention, held_out, linear_probe, load_checkpoint, sweep, ProbeConfig, RunConfig,
    SweepAxis, Trainer,
};
use cmac_core::{CmacModel, Modality};

#[derive(Parser, Debug)]
#[command(name = "cmac", version, about = "Cross-modal attention consistency for audio-visual self-supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes config echo, manifest, metrics and checkpoints.
    #[command(allow_negative_numbers = true)]
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Write attention overlays and raw grids for held-out pairs.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out pair indices, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        pairs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// In-region mass ratio and pointing accuracy of all four maps.
    EvalLoc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear classifier on frozen pooled features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::Both)]
        modality: Which,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Train and evaluate once per value along one ablation axis.
    #[command(allow_negative_numbers = true)]
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// lambda, norm_mode, scales or sampling_policy.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Finite-difference check of the full objective on micro-scale models.
    Gradcheck {
        /// Number of random model/batch instances.
        #[arg(long, default_value_t = 3)]
        cases: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Visual,
    Audio,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Size of the held-out evaluation set.
    #[arg(long, default_value_t = 256)]
    eval_size: usize,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    probe_iterations: Option<usize>,
    #[arg(long)]
    probe_lr: Option<f64>,
    /// Train the probe on permuted labels (chance baseline).
    #[arg(long)]
    shuffle_labels: bool,
}

impl ProbeArgs {
    fn config(&self) -> ProbeConfig {
        let mut p = ProbeConfig::default();
        if let Some(i) = self.probe_iterations {
            p.iterations = i;
        }
        if let Some(lr) = self.probe_lr {
            p.lr = lr;
        }
        p.shuffle_labels = self.shuffle_labels;
        p
    }
}

/// Run configuration sources. Flags mirror the top-level config keys; any
/// key, including nested `data.*` and `augment.*` ones, can be set with
/// `--set`.
#[derive(Args, Debug)]
struct RunArgs {
    /// TOML file with any subset of the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override in TOML syntax, e.g. `data.classes=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    bank_capacity: Option<usize>,
    /// `cosine`, `softmax` or `none`.
    #[arg(long)]
    norm_mode: Option<String>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    within_modal_negatives: Option<bool>,
    #[arg(long)]
    within_modal_positives: Option<bool>,
    #[arg(long)]
    detach_guidance: Option<bool>,
    #[arg(long)]
    target_momentum: Option<f64>,
    /// `batch` or `identity`.
    #[arg(long)]
    norm: Option<String>,
    /// `f64` or `f32`.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    dataset_shard: Option<PathBuf>,
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = match cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
            toml::Value::Table(t) => t,
            _ => bail!("config key {key:?}: {part:?} is not a section"),
        };
    }
    bail!("empty config key")
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {path:?}"))?,
            None => RunConfig::default(),
        };
        let mut table: toml::Table = toml::from_str(&base.to_toml())?;
        for s in &self.sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set {s:?} is not key=value"))?;
            let value: toml::Table =
                toml::from_str(&format!("v = {v}")).or_else(|_| toml::from_str(&format!("v = {:?}", v)))?;
            set_path(&mut table, k.trim(), value["v"].clone())?;
        }
        let mut put = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                table.insert(k.to_string(), v);
            }
        };
        let int = |v: Option<u64>| v.map(|x| toml::Value::Integer(x as i64));
        let size = |v: Option<usize>| v.map(|x| toml::Value::Integer(x as i64));
        let float = |v: Option<f64>| v.map(toml::Value::Float);
        let boolean = |v: Option<bool>| v.map(toml::Value::Boolean);
        let text = |v: Option<String>| v.map(toml::Value::String);
        let path = |v: &Option<PathBuf>| v.as_ref().map(|p| toml::Value::String(p.display().to_string()));
        put("seed", int(self.seed));
        put("out_dir", path(&self.out_dir));
        put("lr", float(self.lr));
        put("weight_decay", float(self.weight_decay));
        put("momentum", float(self.momentum));
        put("batch_size", size(self.batch_size));
        put("epochs", int(self.epochs));
        put("steps", int(self.steps));
        put("warmup_fraction", float(self.warmup_fraction));
        put("tau", float(self.tau));
        put("lambda", float(self.lambda));
        put("bank_capacity", size(self.bank_capacity));
        put("norm_mode", text(self.norm_mode.clone()));
        put("scales", size(self.scales));
        put("within_modal_negatives", boolean(self.within_modal_negatives));
        put("within_modal_positives", boolean(self.within_modal_positives));
        put("detach_guidance", boolean(self.detach_guidance));
        put("target_momentum", float(self.target_momentum));
        put("norm", text(self.norm.clone()));
        put("precision", text(self.precision.clone()));
        put("checkpoint_every", int(self.checkpoint_every));
        put("dataset_size", size(self.dataset_size));
        put("data_seed", int(self.data_seed));
        put("dataset_shard", path(&self.dataset_shard));
        Ok(RunConfig::from_toml_str(&toml::to_string(&table)?)?)
    }
}

/// Model restored from a checkpoint, plus its run configuration.
fn restore(path: &Path) -> Result<(RunConfig, CmacModel)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {path:?}"))?;
    let mut model = CmacModel::new(&ckpt.config.model_config(), ckpt.config.seed)?;
    ckpt.restore(&mut model)?;
    Ok((ckpt.config, model))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&path).with_context(|| format!("resuming from {path:?}"))?,
                None => Trainer::new(&run.resolve()?)?,
            };
            let cfg = &trainer.config;
            log::info!(
                "training {} steps ({} per epoch, warmup {}) into {:?}",
                cfg.total_steps(),
                cfg.iterations_per_epoch(),
                cfg.warmup_steps(),
                cfg.out_dir
            );
            let records = trainer.run()?;
            if let Some(last) = records.last() {
                print_json(last)?;
            }
        }
        Command::ExportAttn { checkpoint, pairs, out, eval } => {
            let (cfg, mut model) = restore(&checkpoint)?;
            let ds = held_out(&cfg, eval.eval_size)?;
            if let Some(&bad) = pairs.iter().find(|&&i| i >= ds.len()) {
                bail!("pair {bad} outside the held-out set of {}", ds.len());
            }
            for file in export_attention(&mut model, &ds, &pairs, &out)? {
                println!("{}", out.join(file).display());
            }
        }
        Command::EvalLoc { checkpoint, eval, out } => {
            let (cfg, mut model) = restore(&checkpoint)?;
            let ds = held_out(&cfg, eval.eval_size)?;
            let report = eval_localization(&mut model, &ds, 32)?;
            if let Some(out) = out {
                fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            }
            print_json(&report)?;
        }
        Command::Probe { checkpoint, modality, eval, probe } => {
            let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {checkpoint:?}"))?;
            let mut trainer = Trainer::new(&ckpt.config)?;
            ckpt.restore(&mut trainer.model)?;
            let test = held_out(&ckpt.config, eval.eval_size)?;
            let modalities: &[Modality] = match modality {
                Which::Visual => &[Modality::Visual],
                Which::Audio => &[Modality::Audio],
                Which::Both => &[Modality::Visual, Modality::Audio],
            };
            for &m in modalities {
                let report = linear_probe(&mut trainer.model, m, &trainer.dataset, &test, &probe.config())?;
                print_json(&serde_json::json!({"modality": m, "report": report}))?;
            }
        }
        Command::Sweep { run, axis, values, eval, probe } => {
            let base = run.resolve()?;
            for row in sweep(&base, axis, &values, &probe.config(), eval.eval_size)? {
                print_json(&row)?;
            }
            println!("{}", base.out_dir.join("sweep.tsv").display());
        }
        Command::Gradcheck { cases, seed, step, threshold, batch } => {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let mut cfg = micro_config();
                cfg.detach_guidance = false;
                cfg.contrastive.use_within_modal_negatives = case % 2 == 1;
                cfg.contrastive.use_within_modal_positives = case % 3 == 2;
                let mut model = CmacModel::new(&cfg, seed.wrapping_add(case))?;
                jitter_parameters(&mut model, 0.1, seed.wrapping_add(2000 + case))?;
                let data = random_av_batch(&cfg, batch, seed.wrapping_add(1000 + case))?;
                let report = gradcheck_model(&mut model, &data, step)?;
                println!(
                    "case {case}: {} coordinates, max rel err {:.3e} ({})",
                    report.coordinates, report.max_relative_error, report.worst
                );
                worst = worst.max(report.max_relative_error);
            }
            if !(worst < threshold) {
                bail!("gradient check failed: max relative error {worst:.3e} >= {threshold:.1e}");
            }
            println!("gradient check passed: max relative error {worst:.3e} < {threshold:.1e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
