//! The full objective: encoders, transforms, filters, guided and predicted
//! attention, projected embeddings, memory banks and the weighted sum of
//! contrastive and consistency terms.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_consistency_loss, predict_attention, SaliencyHead};
use crate::contrastive::{cl_loss, ContrastiveConfig, ContrastiveTerms, MemoryBank, ProjectionHead};
use crate::encoders::{ConvEncoder, EncoderConfig, MomentumPair};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, NormKind};
use crate::optim::Parameter;
use crate::pcf::{guided_attention, make_filters, AttentionMap, FilterBank, PcfConfig, Transform};
use crate::tensor::{global_avg_pool, Precision, Tensor};
use crate::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual: EncoderConfig,
    pub audio: EncoderConfig,
    pub filter_channels: usize,
    pub embed_dim: usize,
    pub norm: NormKind,
    pub pcf: PcfConfig,
    pub contrastive: ContrastiveConfig,
    /// Treat guided attention as a constant target in the consistency loss.
    pub detach_guidance: bool,
    /// Momentum of the target branches.
    pub momentum: f64,
    pub bank_capacity: usize,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            visual: EncoderConfig::desk_visual(),
            audio: EncoderConfig::desk_audio(),
            filter_channels: 32,
            embed_dim: 32,
            norm: NormKind::Batch,
            pcf: PcfConfig::default(),
            contrastive: ContrastiveConfig::default(),
            detach_guidance: true,
            momentum: 0.999,
            bank_capacity: 512,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.audio.validate()?;
        if self.visual.spatial_rank() != 3 || self.audio.spatial_rank() != 2 {
            return Err(Error::Config("visual input must be [T, H, W] and audio [T~, F]".into()));
        }
        if self.filter_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("filter and embedding widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        self.pcf.validate()?;
        self.contrastive.validate()?;
        let (_, vgrid) = self.visual.output_shape()?;
        let (_, agrid) = self.audio.output_shape()?;
        self.pcf.check_grid(&vgrid)?;
        self.pcf.check_grid(&agrid)?;
        Ok(())
    }
}

/// A synchronized batch: `visual [N, 3, T, H, W]`, `audio [N, 1, T~, F]`,
/// plus second clips of the same videos when within-modal positives are on.
#[derive(Clone, Debug)]
pub struct AvBatch {
    pub visual: Tensor,
    pub audio: Tensor,
    pub visual_second: Option<Tensor>,
    pub audio_second: Option<Tensor>,
}

impl AvBatch {
    pub fn new(visual: Tensor, audio: Tensor) -> Self {
        AvBatch {
            visual,
            audio,
            visual_second: None,
            audio_second: None,
        }
    }

    pub fn len(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder, transform and projection of one modality.
#[derive(Debug)]
pub struct Branch {
    pub encoder: ConvEncoder,
    pub transform: Transform,
    pub projection: ProjectionHead,
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `f(x)`, `[N, C, grid...]`.
    pub features: Tensor,
    /// `g(f(x))`, `[N, C_f, grid...]`.
    pub transformed: Tensor,
    /// Unit embeddings of the pooled filter, `[N, D_e]`.
    pub embedding: Tensor,
    pub degenerate: Vec<bool>,
}

impl Branch {
    pub fn new(modality: Modality, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let enc_cfg = match modality {
            Modality::Visual => &cfg.visual,
            Modality::Audio => &cfg.audio,
        };
        let encoder = ConvEncoder::new(modality, enc_cfg, cfg.norm, seed)?;
        let transform = Transform::new(
            modality,
            enc_cfg.out_channels(),
            cfg.filter_channels,
            enc_cfg.spatial_rank(),
            cfg.norm,
            seed,
        )?;
        let projection = ProjectionHead::new(modality, cfg.filter_channels, cfg.embed_dim, seed)?;
        Ok(Branch {
            encoder,
            transform,
            projection,
        })
    }

    /// Features, transformed map, and the transformed map's pooled filter.
    pub fn features(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let features = self.encoder.encode(x, mode)?;
        let transformed = self.transform.forward(&features, mode)?;
        Ok((features, transformed))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(BranchOutput, Tensor)> {
        let (features, transformed) = self.features(x, mode)?;
        let pooled = global_avg_pool(&transformed)?;
        let kappa = pooled.reshape(&pooled.shape()[..2])?;
        let (embedding, degenerate) = self.projection.project(&kappa)?;
        Ok((
            BranchOutput {
                features,
                transformed,
                embedding,
                degenerate,
            },
            kappa,
        ))
    }
}

impl Module for Branch {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.parameters();
        v.extend(self.transform.parameters());
        v.extend(self.projection.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.parameters_mut();
        v.extend(self.transform.parameters_mut());
        v.extend(self.projection.parameters_mut());
        v
    }
    fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        let mut v = self.encoder.buffers();
        v.extend(self.transform.buffers());
        v
    }
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut v = self.encoder.buffers_mut();
        v.extend(self.transform.buffers_mut());
        v
    }
}

/// The four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Visual anchors against audio keys.
    pub cl_va: f64,
    /// Audio anchors against visual keys.
    pub cl_av: f64,
    pub ac_v: f64,
    pub ac_a: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `cl_va + cl_av + lambda * (ac_v + ac_a)` from the logged terms.
    pub fn recombined(&self) -> f64 {
        self.cl_va + self.cl_av + self.lambda * (self.ac_v + self.ac_a)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub total: Tensor,
    pub cl_va: Tensor,
    pub cl_av: Tensor,
    pub ac_v: Tensor,
    pub ac_a: Tensor,
    pub breakdown: LossBreakdown,
    pub filters: FilterBank,
    pub s_v: AttentionMap,
    pub s_a: AttentionMap,
    pub s_hat_v: AttentionMap,
    pub s_hat_a: AttentionMap,
    /// Target embeddings of this batch, to be pushed into the banks.
    pub keys_v: Vec<f64>,
    pub keys_a: Vec<f64>,
}

/// Guided and predicted maps for both modalities.
#[derive(Clone, Debug)]
pub struct AttentionSet {
    pub s_v: AttentionMap,
    pub s_a: AttentionMap,
    pub s_hat_v: AttentionMap,
    pub s_hat_a: AttentionMap,
}

#[derive(Debug)]
pub struct CmacModel {
    config: ModelConfig,
    pub visual: MomentumPair<Branch>,
    pub audio: MomentumPair<Branch>,
    pub saliency_v: SaliencyHead,
    pub saliency_a: SaliencyHead,
    pub bank_v: MemoryBank,
    pub bank_a: MemoryBank,
}

impl CmacModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pair = |m: Modality| -> Result<MomentumPair<Branch>> {
            MomentumPair::new(Branch::new(m, config, seed)?, Branch::new(m, config, seed)?, config.momentum)
        };
        let mut model = CmacModel {
            visual: pair(Modality::Visual)?,
            audio: pair(Modality::Audio)?,
            saliency_v: SaliencyHead::new(Modality::Visual, config.visual.out_channels(), 3, seed)?,
            saliency_a: SaliencyHead::new(Modality::Audio, config.audio.out_channels(), 2, seed)?,
            bank_v: MemoryBank::new(Modality::Visual, config.bank_capacity, config.embed_dim),
            bank_a: MemoryBank::new(Modality::Audio, config.bank_capacity, config.embed_dim),
            config: config.clone(),
        };
        if config.precision != Precision::F64 {
            for p in model.all_parameters_mut() {
                p.set_precision(config.precision);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Overwrite the loss weights and sampling flags (used by resume and sweeps).
    pub fn set_contrastive(&mut self, cfg: ContrastiveConfig) -> Result<()> {
        cfg.validate()?;
        self.config.contrastive = cfg;
        Ok(())
    }

    fn all_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let CmacModel {
            visual,
            audio,
            saliency_v,
            saliency_a,
            ..
        } = self;
        let mut v = visual.online.parameters_mut();
        v.extend(audio.online.parameters_mut());
        v.extend(saliency_v.parameters_mut());
        v.extend(saliency_a.parameters_mut());
        v.extend(visual.target.parameters_mut());
        v.extend(audio.target.parameters_mut());
        v
    }

    /// Frozen momentum-target parameters.
    pub fn target_parameters(&self) -> Vec<&Parameter> {
        let mut v = self.visual.target.parameters();
        v.extend(self.audio.target.parameters());
        v
    }

    pub fn target_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.visual.target.parameters_mut();
        v.extend(self.audio.target.parameters_mut());
        v
    }

    pub fn target_buffers(&self) -> Vec<(String, &Vec<f64>)> {
        let mut v = self.visual.target.buffers();
        v.extend(self.audio.target.buffers());
        v
    }

    pub fn target_buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut v = self.visual.target.buffers_mut();
        v.extend(self.audio.target.buffers_mut());
        v
    }

    fn prepare(&self, x: &Tensor) -> Tensor {
        if self.config.precision == x.precision() {
            x.clone()
        } else {
            x.clone().with_precision(self.config.precision)
        }
    }

    fn guided(&self, online_v: &BranchOutput, online_a: &BranchOutput, filters: &FilterBank) -> Result<(AttentionMap, AttentionMap)> {
        if self.config.detach_guidance {
            let detached = FilterBank {
                kappa_v: filters.kappa_v.detach(),
                kappa_a: filters.kappa_a.detach(),
            };
            guided_attention(
                &online_v.transformed.detach(),
                &online_a.transformed.detach(),
                &detached,
                &self.config.pcf,
            )
        } else {
            guided_attention(&online_v.transformed, &online_a.transformed, filters, &self.config.pcf)
        }
    }

    /// Full forward pass and objective on one batch. Banks are read, not written.
    pub fn forward(&mut self, batch: &AvBatch, mode: Mode) -> Result<ForwardOutput> {
        if batch.is_empty() || batch.audio.shape()[0] != batch.len() {
            return Err(Error::Contract(format!(
                "batch needs matching non-zero visual/audio counts, got {} and {}",
                batch.len(),
                batch.audio.shape()[0]
            )));
        }
        let cfg = self.config.contrastive;
        let xv = self.prepare(&batch.visual);
        let xa = self.prepare(&batch.audio);

        let (ov, _) = self.visual.online.forward(&xv, mode)?;
        let (oa, _) = self.audio.online.forward(&xa, mode)?;
        let filters = make_filters(&ov.transformed, &oa.transformed)?;
        let (s_v, s_a) = self.guided(&ov, &oa, &filters)?;
        let s_hat_v = predict_attention(&ov.features, &self.saliency_v)?;
        let s_hat_a = predict_attention(&oa.features, &self.saliency_a)?;

        let (tv, _) = self.visual.target.forward(&xv, mode)?;
        let (ta, _) = self.audio.target.forward(&xa, mode)?;
        let (second_v, second_a) = if cfg.use_within_modal_positives {
            let (Some(v2), Some(a2)) = (&batch.visual_second, &batch.audio_second) else {
                return Err(Error::Contract("within-modal positives need a second clip per video".into()));
            };
            let v2 = self.prepare(v2);
            let a2 = self.prepare(a2);
            (
                Some(self.visual.target.forward(&v2, mode)?.0.embedding),
                Some(self.audio.target.forward(&a2, mode)?.0.embedding),
            )
        } else {
            (None, None)
        };

        let cl_va = cl_loss(
            &ContrastiveTerms {
                anchor_modality: Modality::Visual,
                anchors: &ov.embedding,
                cross_keys: &ta.embedding,
                cross_bank: &self.bank_a,
                peer_keys: &tv.embedding,
                peer_bank: &self.bank_v,
                second_view: second_v.as_ref(),
            },
            &cfg,
        )?;
        let cl_av = cl_loss(
            &ContrastiveTerms {
                anchor_modality: Modality::Audio,
                anchors: &oa.embedding,
                cross_keys: &tv.embedding,
                cross_bank: &self.bank_v,
                peer_keys: &ta.embedding,
                peer_bank: &self.bank_a,
                second_view: second_a.as_ref(),
            },
            &cfg,
        )?;
        let detach = self.config.detach_guidance;
        let ac_v = attention_consistency_loss(&s_v, &s_hat_v, detach)?;
        let ac_a = attention_consistency_loss(&s_a, &s_hat_a, detach)?;
        let total = cl_va.add(&cl_av)?.add(&ac_v.add(&ac_a)?.scale(cfg.lambda))?;

        let breakdown = LossBreakdown {
            cl_va: cl_va.item(),
            cl_av: cl_av.item(),
            ac_v: ac_v.item(),
            ac_a: ac_a.item(),
            lambda: cfg.lambda,
            total: total.item(),
        };
        Ok(ForwardOutput {
            total,
            cl_va,
            cl_av,
            ac_v,
            ac_a,
            breakdown,
            filters,
            s_v,
            s_a,
            s_hat_v,
            s_hat_a,
            keys_v: tv.embedding.to_vec(),
            keys_a: ta.embedding.to_vec(),
        })
    }

    /// Guided and predicted attention only (no targets, no losses).
    pub fn attention(&mut self, batch: &AvBatch, mode: Mode) -> Result<AttentionSet> {
        let xv = self.prepare(&batch.visual);
        let xa = self.prepare(&batch.audio);
        let (ov, _) = self.visual.online.forward(&xv, mode)?;
        let (oa, _) = self.audio.online.forward(&xa, mode)?;
        let filters = make_filters(&ov.transformed, &oa.transformed)?;
        let (s_v, s_a) = self.guided(&ov, &oa, &filters)?;
        Ok(AttentionSet {
            s_v,
            s_a,
            s_hat_v: predict_attention(&ov.features, &self.saliency_v)?,
            s_hat_a: predict_attention(&oa.features, &self.saliency_a)?,
        })
    }

    /// Globally pooled encoder features `[N, C]` of one modality.
    pub fn pooled_features(&mut self, modality: Modality, x: &Tensor, mode: Mode) -> Result<Vec<f64>> {
        let x = self.prepare(x);
        let enc = match modality {
            Modality::Visual => &mut self.visual.online.encoder,
            Modality::Audio => &mut self.audio.online.encoder,
        };
        let f = enc.encode(&x.detach(), mode)?;
        Ok(global_avg_pool(&f)?.to_vec())
    }

    /// Momentum update of both targets, then enqueue this batch's keys.
    pub fn after_step(&mut self, out: &ForwardOutput) -> Result<()> {
        self.visual.momentum_update()?;
        self.audio.momentum_update()?;
        self.bank_v.push(&out.keys_v)?;
        self.bank_a.push(&out.keys_a)?;
        Ok(())
    }
}

impl Module for CmacModel {
    /// Trainable (online) parameters.
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.visual.online.parameters();
        v.extend(self.audio.online.parameters());
        v.extend(self.saliency_v.parameters());
        v.extend(self.saliency_a.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.visual.online.parameters_mut();
        v.extend(self.audio.online.parameters_mut());
        v.extend(self.saliency_v.parameters_mut());
        v.extend(self.saliency_a.parameters_mut());
        v
    }
    fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        let mut v = self.visual.online.buffers();
        v.extend(self.audio.online.buffers());
        v
    }
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut v = self.visual.online.buffers_mut();
        v.extend(self.audio.online.buffers_mut());
        v
    }
}
