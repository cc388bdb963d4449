//! Run configuration, the training loop, metrics and run manifests.

mod checkpoint;
mod eval;
mod protocol;
mod sweep;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveConfig, MemoryBank};
use crate::data::{augment_audio, augment_visual, derive_seed, AugmentConfig, Dataset, SyntheticParams};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, NormKind};
use crate::model::{AvBatch, CmacModel, LossBreakdown, ModelConfig};
use crate::optim::sgd_step;
use crate::pcf::{NormMode, PcfConfig};
use crate::tensor::{Precision, Tensor};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FILE};
pub use eval::{
    eval_batch, eval_localization, export_attention, extract_features, linear_probe, localization_stats, read_grid,
    write_grid, LocStats, LocalizationReport, ProbeConfig, ProbeReport,
};
pub use protocol::{
    evaluate, learning_signal, median, SeedSignal, SignalCheck, SignalProtocol, SignalReport, SignalThresholds,
};
pub use sweep::{held_out, sweep, SweepAxis, SweepRow};

/// Every knob of a training run. Serialized verbatim (TOML) into the output
/// directory and into each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// Clips per step (videos per step halve with within-modal positives).
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    /// Fraction of total steps spent in linear learning-rate warmup.
    pub warmup_fraction: f64,
    pub tau: f64,
    pub lambda: f64,
    pub bank_capacity: usize,
    pub norm_mode: NormMode,
    pub scales: usize,
    pub within_modal_negatives: bool,
    pub within_modal_positives: bool,
    pub detach_guidance: bool,
    /// Momentum of the target encoders.
    pub target_momentum: f64,
    pub norm: NormKind,
    pub precision: Precision,
    /// Also write `checkpoint-<step>.bin` every this many steps (0 = never).
    pub checkpoint_every: u64,
    pub dataset_size: usize,
    pub data_seed: u64,
    /// Read pairs from a shard instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_shard: Option<PathBuf>,
    pub data: SyntheticParams,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            lr: 0.01,
            weight_decay: 1e-5,
            momentum: 0.9,
            batch_size: 16,
            epochs: 63,
            steps: None,
            warmup_fraction: 0.05,
            tau: c.tau,
            lambda: c.lambda,
            bank_capacity: 512,
            norm_mode: NormMode::Cosine,
            scales: 2,
            within_modal_negatives: c.use_within_modal_negatives,
            within_modal_positives: c.use_within_modal_positives,
            detach_guidance: true,
            target_momentum: 0.999,
            norm: NormKind::Batch,
            precision: Precision::F64,
            checkpoint_every: 0,
            dataset_size: 512,
            data_seed: 1,
            dataset_shard: None,
            data: SyntheticParams::default(),
            augment: AugmentConfig::desk_train(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            use_within_modal_negatives: self.within_modal_negatives,
            use_within_modal_positives: self.within_modal_positives,
            lambda: self.lambda,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            norm: self.norm,
            pcf: PcfConfig {
                mode: self.norm_mode,
                scales: self.scales,
            },
            contrastive: self.contrastive(),
            detach_guidance: self.detach_guidance,
            momentum: self.target_momentum,
            bank_capacity: self.bank_capacity,
            precision: self.precision,
            ..ModelConfig::desk()
        }
    }

    /// Videos per step: with within-modal positives each video contributes
    /// two clips, so a batch holds half as many videos.
    pub fn videos_per_batch(&self) -> usize {
        if self.within_modal_positives {
            self.batch_size / 2
        } else {
            self.batch_size
        }
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.dataset_size.div_ceil(self.videos_per_batch().max(1)) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps.unwrap_or(self.epochs * self.iterations_per_epoch())
    }

    pub fn warmup_steps(&self) -> u64 {
        if self.warmup_fraction == 0.0 {
            0
        } else {
            ((self.warmup_fraction * self.total_steps() as f64).round() as u64).max(1)
        }
    }

    /// Linear warmup from `lr / warmup_steps` at step 0 to `lr` at the last
    /// warmup step, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.lr * (step + 1) as f64 / w as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be a finite non-negative number", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight decay must be >= 0 and momentum in [0, 1)".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if self.within_modal_positives && self.batch_size % 2 != 0 {
            return bad("within-modal positives need an even batch size".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} not in [0, 1]", self.warmup_fraction));
        }
        if self.total_steps() == 0 {
            return bad("run has zero steps".into());
        }
        if self.dataset_size < self.videos_per_batch() && self.dataset_shard.is_none() {
            return bad(format!("dataset of {} pairs smaller than one batch", self.dataset_size));
        }
        self.data.validate()?;
        self.augment.validate(&self.data)?;
        let m = self.model_config();
        if m.visual.input != [self.data.frames, self.augment.crop, self.augment.crop]
            || m.audio.input != [self.data.spec_time, self.data.spec_freq]
        {
            return bad(format!(
                "encoders expect clips {:?} and spectrograms {:?}; data gives {}x{}x{} crops and {}x{}",
                m.visual.input,
                m.audio.input,
                self.data.frames,
                self.augment.crop,
                self.augment.crop,
                self.data.spec_time,
                self.data.spec_freq
            ));
        }
        m.validate()
    }
}

/// One line of `metrics.jsonl`. Wall-clock time is kept out of it (see
/// `timing.jsonl`) so that identical runs produce identical logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub batch_seed: u64,
    pub total: f64,
    pub cl_va: f64,
    pub cl_av: f64,
    pub ac_v: f64,
    pub ac_a: f64,
    pub lambda: f64,
    pub bank_fill_v: usize,
    pub bank_fill_a: usize,
    /// L2 norm of the gradient per parameter group (`f_v`, `g_a`, `h_v`, ...).
    pub grad_norms: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            cl_va: self.cl_va,
            cl_av: self.cl_av,
            ac_v: self.ac_v,
            ac_a: self.ac_a,
            lambda: self.lambda,
            total: self.total,
        }
    }
}

/// Written once per run as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub videos_per_batch: usize,
    pub clips_per_video: usize,
    pub iterations_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Encoder forward passes per step (online + target, per clip view).
    pub forward_passes_per_step: usize,
    pub trainable_parameters: usize,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, trainable_parameters: usize) -> Self {
        let views = if cfg.within_modal_positives { 2 } else { 1 };
        RunManifest {
            config: cfg.clone(),
            videos_per_batch: cfg.videos_per_batch(),
            clips_per_video: views,
            iterations_per_epoch: cfg.iterations_per_epoch(),
            total_steps: cfg.total_steps(),
            warmup_steps: cfg.warmup_steps(),
            // online v/a on the first view, target v/a on every view
            forward_passes_per_step: 2 + 2 * views,
            trainable_parameters,
        }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const MANIFEST_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIVERGENCE_FILE: &str = "diverged.json";

/// Augmented training batch for dataset `indices`; per-clip augmentation
/// seeds derive from `batch_seed`, so the batch depends on nothing else.
pub fn training_batch(
    ds: &Dataset,
    indices: &[usize],
    aug: &AugmentConfig,
    batch_seed: u64,
    second_view: bool,
) -> Result<AvBatch> {
    let p = &ds.params;
    let views = if second_view { 2 } else { 1 };
    let mut vis = vec![Vec::new(); views];
    let mut aud = vec![Vec::new(); views];
    for (slot, &i) in indices.iter().enumerate() {
        let pair = ds
            .pairs
            .get(i)
            .ok_or_else(|| Error::Contract(format!("dataset index {i} out of range")))?;
        for view in 0..views {
            let s = derive_seed(batch_seed, (slot * 2 + view) as u64);
            let v = augment_visual(&pair.clip, &pair.region, p, aug, derive_seed(s, 0))?;
            vis[view].extend(v.clip);
            aud[view].extend(augment_audio(&pair.spec, p, aug, derive_seed(s, 1))?);
        }
    }
    let n = indices.len();
    let vshape = [n, 3, p.frames, aug.crop, aug.crop];
    let ashape = [n, 1, p.spec_time, p.spec_freq];
    let mut vi = vis.into_iter();
    let mut ai = aud.into_iter();
    let mut batch = AvBatch::new(
        Tensor::new(vi.next().expect("one view"), &vshape)?,
        Tensor::new(ai.next().expect("one view"), &ashape)?,
    );
    if second_view {
        batch.visual_second = Some(Tensor::new(vi.next().expect("two views"), &vshape)?);
        batch.audio_second = Some(Tensor::new(ai.next().expect("two views"), &ashape)?);
    }
    Ok(batch)
}

fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5A4D_504C_4552, epoch));
    let mut p: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Group name of a parameter: the text before the first dot.
fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// A training run in progress.
pub struct Trainer {
    pub config: RunConfig,
    pub model: CmacModel,
    pub dataset: Dataset,
    /// Completed steps.
    pub step: u64,
    permutation: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh model and dataset for `config`; nothing is written yet.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = CmacModel::new(&config.model_config(), config.seed)?;
        let dataset = Self::load_dataset(config)?;
        Ok(Trainer {
            config: config.clone(),
            model,
            dataset,
            step: 0,
            permutation: None,
        })
    }

    fn load_dataset(config: &RunConfig) -> Result<Dataset> {
        let ds = match &config.dataset_shard {
            Some(path) => Dataset::import_shard(path)?,
            None => Dataset::generate(&config.data, config.dataset_size, config.data_seed)?,
        };
        if ds.params != config.data {
            return Err(Error::Config("dataset shard parameters differ from the run's data section".into()));
        }
        if ds.len() < config.videos_per_batch() {
            return Err(Error::Config(format!("dataset of {} pairs smaller than one batch", ds.len())));
        }
        Ok(ds)
    }

    /// Restore a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let mut t = Trainer::new(&ckpt.config)?;
        ckpt.restore(&mut t.model)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest::new(&self.config, self.model.num_parameters())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.config, self.step)
    }

    /// Dataset indices and batch seed for step `step` (0-based).
    pub fn batch_plan(&mut self, step: u64) -> (Vec<usize>, u64) {
        let v = self.config.videos_per_batch();
        let ipe = self.config.iterations_per_epoch();
        let len = self.dataset.len();
        let epoch = step / ipe;
        let slot = (step % ipe) as usize;
        if self.permutation.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.permutation = Some((epoch, epoch_permutation(self.config.seed, epoch, len)));
        }
        let perm = &self.permutation.as_ref().expect("set above").1;
        let indices = (0..v).map(|j| perm[(slot * v + j) % len]).collect();
        (indices, derive_seed(self.config.seed, step))
    }

    /// One optimization step; returns its metrics record.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let (indices, batch_seed) = self.batch_plan(step);
        let batch = training_batch(
            &self.dataset,
            &indices,
            &self.config.augment,
            batch_seed,
            self.config.within_modal_positives,
        )?;
        let out = self.model.forward(&batch, Mode::Train)?;
        let b = out.breakdown;
        let failure = if ![b.total, b.cl_va, b.cl_av, b.ac_v, b.ac_a].iter().all(|v| v.is_finite()) {
            Some(format!("non-finite loss {b:?}"))
        } else {
            let d = self.model.config().embed_dim;
            let collapsed = out
                .keys_v
                .chunks(d)
                .chain(out.keys_a.chunks(d))
                .filter(|k| (k.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() > MemoryBank::UNIT_TOL)
                .count();
            (collapsed > 0).then(|| format!("{collapsed} target keys collapsed to zero; losses {b:?}"))
        };
        if let Some(detail) = failure {
            self.dump_divergence(step, batch_seed, &indices, &b, &detail);
            return Err(Error::Diverged {
                step: step + 1,
                batch_seed,
                detail,
            });
        }
        self.model.zero_grad();
        out.total.backward()?;

        let mut sq: BTreeMap<String, f64> = BTreeMap::new();
        for p in self.model.parameters() {
            let g = p.grad().unwrap_or_default();
            *sq.entry(group_of(&p.name).to_string()).or_default() += g.iter().map(|v| v * v).sum::<f64>();
        }
        let lr = self.config.lr_at(step);
        sgd_step(
            self.model.parameters_mut(),
            lr,
            self.config.weight_decay,
            self.config.momentum,
        )?;
        self.model.after_step(&out)?;
        self.step += 1;
        Ok(MetricsRecord {
            step: self.step,
            lr,
            batch_seed,
            total: b.total,
            cl_va: b.cl_va,
            cl_av: b.cl_av,
            ac_v: b.ac_v,
            ac_a: b.ac_a,
            lambda: b.lambda,
            bank_fill_v: self.model.bank_v.len(),
            bank_fill_a: self.model.bank_a.len(),
            grad_norms: sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
        })
    }

    fn dump_divergence(&self, step: u64, batch_seed: u64, indices: &[usize], b: &LossBreakdown, detail: &str) {
        let dump = serde_json::json!({
            "step": step + 1,
            "batch_seed": batch_seed,
            "dataset_indices": indices,
            "pair_seeds": indices.iter().map(|&i| self.dataset.pairs[i].seed).collect::<Vec<_>>(),
            "breakdown": b,
            "detail": detail,
        });
        let path = self.config.out_dir.join(DIVERGENCE_FILE);
        if fs::create_dir_all(&self.config.out_dir).is_ok() {
            let _ = fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default());
        }
        log::error!("training diverged at step {} (batch seed {batch_seed}); dump at {path:?}", step + 1);
    }

    /// Run until `config.total_steps()` steps are complete, writing the
    /// config echo, manifest, metrics and checkpoints into `out_dir`.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let dir = self.config.out_dir.clone();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml())?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest())?)?;
        truncate_metrics(&dir.join(METRICS_FILE), self.step)?;
        truncate_metrics(&dir.join(TIMING_FILE), self.step)?;
        let mut metrics = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
        let mut timing = OpenOptions::new().create(true).append(true).open(dir.join(TIMING_FILE))?;
        let total = self.config.total_steps();
        let started = Instant::now();
        let mut records = Vec::new();
        while self.step < total {
            let t0 = Instant::now();
            let rec = self.train_step()?;
            serde_json::to_writer(&mut metrics, &rec)?;
            metrics.write_all(b"\n")?;
            writeln!(
                timing,
                "{}",
                serde_json::json!({"step": rec.step, "step_seconds": t0.elapsed().as_secs_f64(),
                                   "elapsed_seconds": started.elapsed().as_secs_f64()})
            )?;
            if rec.step % 50 == 0 || rec.step == total {
                log::info!(
                    "step {}/{} total {:.4} cl {:.4}/{:.4} ac {:.4}/{:.4}",
                    rec.step,
                    total,
                    rec.total,
                    rec.cl_va,
                    rec.cl_av,
                    rec.ac_v,
                    rec.ac_a
                );
            }
            if self.config.checkpoint_every > 0 && rec.step % self.config.checkpoint_every == 0 {
                self.save(&dir.join(format!("checkpoint-{}.bin", rec.step)))?;
            }
            records.push(rec);
        }
        self.save(&dir.join(CHECKPOINT_FILE))?;
        Ok(records)
    }
}

/// Drop records past `keep` steps from a line-delimited log, so a resumed
/// run continues the log seamlessly.
fn truncate_metrics(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if keep == 0 {
        File::create(path)?;
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= keep) {
            kept.push(line);
        }
    }
    let mut f = File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Train a fresh run described by `config`.
pub fn train(config: &RunConfig) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(config)?;
    let records = t.run()?;
    Ok((t, records))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
