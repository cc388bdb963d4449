//! Projection heads, memory banks and the contrastive objectives.
//!
//! Anchors are online embeddings; keys and bank entries come from the
//! momentum targets and never carry gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_rng, kaiming_uniform, Module};
use crate::optim::Parameter;
use crate::tensor::{l2_normalize_rows, linear, masked_cross_entropy, Tensor};
use crate::Modality;

/// Norm below which a projected vector is treated as degenerate.
pub const PROJECTION_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub use_within_modal_negatives: bool,
    pub use_within_modal_positives: bool,
    /// Weight on the attention-consistency terms.
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.07,
            use_within_modal_negatives: true,
            use_within_modal_positives: false,
            lambda: 1.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Fully connected `C_f -> D_e` map followed by L2 normalization.
#[derive(Debug)]
pub struct ProjectionHead {
    weight: Parameter,
    bias: Parameter,
}

impl ProjectionHead {
    pub fn new(modality: Modality, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let prefix = match modality {
            Modality::Visual => "proj_v",
            Modality::Audio => "proj_a",
        };
        // Both heads start from the same weights so that, early on, similar
        // embeddings mean similar filters in one shared filter space; the
        // cross-modal correlation of filters against feature maps relies on it.
        let mut rng = init_rng(seed, Modality::Visual.stream(3));
        Ok(ProjectionHead {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                kaiming_uniform(&mut rng, in_dim, in_dim * out_dim),
                &[out_dim, in_dim],
            )?,
            bias: Parameter::new(format!("{prefix}.bias"), vec![0.0; out_dim], &[out_dim])?,
        })
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn bias(&self) -> &Parameter {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Unit-norm embeddings `[N, D_e]` for filters `[N, C_f]`, plus a flag per
    /// row marking a (near-)zero pre-normalization vector.
    pub fn project(&self, kappa: &Tensor) -> Result<(Tensor, Vec<bool>)> {
        if kappa.rank() != 2 || kappa.shape()[1] != self.in_dim() {
            return Err(Error::dim(
                "project",
                format!("expected [N, {}], got {:?}", self.in_dim(), kappa.shape()),
            ));
        }
        let z = linear(kappa, self.weight.tensor(), Some(self.bias.tensor()))?;
        l2_normalize_rows(&z, PROJECTION_EPS)
    }
}

impl Module for ProjectionHead {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `exp(cos(x, y) / tau)`.
pub fn sim(x: &[f64], y: &[f64], tau: f64) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (nx * ny).max(1e-12) / tau).exp()
}

/// Fixed-capacity FIFO of unit embeddings from previous batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    modality: Modality,
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    len: usize,
    cursor: usize,
}

impl MemoryBank {
    pub const UNIT_TOL: f64 = 1e-9;

    pub fn new(modality: Modality, capacity: usize, dim: usize) -> Self {
        MemoryBank {
            modality,
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append rows of `embeddings` (`[B, dim]`, row-major), evicting the
    /// oldest entries beyond capacity.
    pub fn push(&mut self, embeddings: &[f64]) -> Result<()> {
        if self.dim == 0 || embeddings.len() % self.dim != 0 {
            return Err(Error::dim(
                "bank_push",
                format!("{} values is not a whole number of {}-d rows", embeddings.len(), self.dim),
            ));
        }
        for row in embeddings.chunks(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > Self::UNIT_TOL {
                return Err(Error::Contract(format!("bank entries must be unit norm, got {norm}")));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for row in embeddings.chunks(self.dim) {
            self.slots[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored entries, oldest first, as `[len, dim]` row-major.
    pub fn entries(&self) -> Vec<f64> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len)
            .flat_map(|i| {
                let slot = (start + i) % self.capacity;
                self.slots[slot * self.dim..(slot + 1) * self.dim].iter().copied()
            })
            .collect()
    }

    /// Raw ring storage `(slots, len, cursor)` for checkpointing.
    pub fn raw_state(&self) -> (&[f64], usize, usize) {
        (&self.slots, self.len, self.cursor)
    }

    /// Rebuild a bank from [`MemoryBank::raw_state`] output.
    pub fn from_raw(modality: Modality, capacity: usize, dim: usize, slots: Vec<f64>, len: usize, cursor: usize) -> Result<Self> {
        if slots.len() != capacity * dim || len > capacity || (capacity > 0 && cursor >= capacity) {
            return Err(Error::Contract(format!(
                "inconsistent bank state: {} slots, len {len}, cursor {cursor}, capacity {capacity}x{dim}",
                slots.len()
            )));
        }
        Ok(MemoryBank {
            modality,
            capacity,
            dim,
            slots,
            len,
            cursor,
        })
    }

    fn check(&self, expected: Modality, role: &str) -> Result<()> {
        if self.modality != expected {
            return Err(Error::Contract(format!(
                "{role} bank holds {:?} embeddings, expected {expected:?}",
                self.modality
            )));
        }
        Ok(())
    }
}

fn key_rows(keys: &Tensor, dim: usize, what: &str) -> Result<Vec<f64>> {
    if keys.rank() != 2 || keys.shape()[1] != dim {
        return Err(Error::dim("contrastive", format!("{what} {:?} for {dim}-d anchors", keys.shape())));
    }
    Ok(keys.to_vec())
}

fn anchor_dims(anchors: &Tensor) -> Result<(usize, usize)> {
    if anchors.rank() != 2 {
        return Err(Error::dim("contrastive", format!("anchors must be [N, D], got {:?}", anchors.shape())));
    }
    let (n, d) = (anchors.shape()[0], anchors.shape()[1]);
    if n == 0 {
        return Err(Error::Contract("contrastive loss over an empty batch".into()));
    }
    Ok((n, d))
}

fn bank_rows(bank: &MemoryBank, dim: usize) -> Result<Vec<f64>> {
    if bank.dim() != dim {
        return Err(Error::dim("contrastive", format!("{}-d bank for {dim}-d anchors", bank.dim())));
    }
    Ok(bank.entries())
}

/// Cross-entropy of anchors against a constant key matrix; the positive
/// for row `n` is key row `n`.
fn nce_against(anchors: &Tensor, keys: Vec<f64>, rows: usize, tau: f64, mask: Option<&[bool]>) -> Result<Tensor> {
    let (n, d) = (anchors.shape()[0], anchors.shape()[1]);
    let keys = Tensor::new(keys, &[rows, d])?;
    let logits = linear(anchors, &keys, None)?.scale(1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    masked_cross_entropy(&logits, &targets, mask)
}

/// `-(1/N) sum_n log[ sim(v_n, a_n) / sum_m sim(v_n, a_m) ]` with `m` over
/// the in-batch keys and the bank.
pub fn nce_loss(anchors: &Tensor, keys: &Tensor, bank: &MemoryBank, tau: f64) -> Result<Tensor> {
    let (n, d) = anchor_dims(anchors)?;
    if keys.shape()[0] != n {
        return Err(Error::dim("nce_loss", format!("{} keys for {n} anchors", keys.shape()[0])));
    }
    let mut all = key_rows(keys, d, "keys")?;
    all.extend(bank_rows(bank, d)?);
    nce_against(anchors, all, n + bank.len(), tau, None)
}

/// Everything one direction of the remoulded contrastive loss reads.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms<'a> {
    pub anchor_modality: Modality,
    /// Online embeddings of the anchor modality, `[N, D]`.
    pub anchors: &'a Tensor,
    /// Target embeddings of the other modality for the same clips.
    pub cross_keys: &'a Tensor,
    pub cross_bank: &'a MemoryBank,
    /// Target embeddings of the anchor modality for the same clips.
    pub peer_keys: &'a Tensor,
    pub peer_bank: &'a MemoryBank,
    /// Target embeddings of a second clip per video (anchor modality).
    pub second_view: Option<&'a Tensor>,
}

/// One direction of the contrastive objective. The denominator always holds
/// the cross-modal keys and bank; within-modal negatives add the same-modal
/// batch peers (excluding the anchor's own clip) and the same-modal bank.
/// Within-modal positives add a second NCE term pulling the anchor toward a
/// second clip of its own video.
pub fn cl_loss(terms: &ContrastiveTerms<'_>, cfg: &ContrastiveConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = anchor_dims(terms.anchors)?;
    let own = terms.anchor_modality;
    terms.cross_bank.check(own.other(), "cross-modal")?;
    terms.peer_bank.check(own, "within-modal")?;
    if terms.cross_keys.shape()[0] != n {
        return Err(Error::dim("cl_loss", format!("{} cross keys for {n} anchors", terms.cross_keys.shape()[0])));
    }

    let mut keys = key_rows(terms.cross_keys, d, "cross keys")?;
    keys.extend(bank_rows(terms.cross_bank, d)?);
    let cross_cols = n + terms.cross_bank.len();
    let peer_bank = if cfg.use_within_modal_negatives {
        bank_rows(terms.peer_bank, d)?
    } else {
        Vec::new()
    };

    let loss = if cfg.use_within_modal_negatives {
        if terms.peer_keys.shape()[0] != n {
            return Err(Error::dim("cl_loss", format!("{} peer keys for {n} anchors", terms.peer_keys.shape()[0])));
        }
        keys.extend(key_rows(terms.peer_keys, d, "peer keys")?);
        keys.extend_from_slice(&peer_bank);
        let cols = cross_cols + n + terms.peer_bank.len();
        let mut mask = vec![true; n * cols];
        for r in 0..n {
            mask[r * cols + cross_cols + r] = false;
        }
        nce_against(terms.anchors, keys, cols, cfg.tau, Some(&mask))?
    } else {
        nce_against(terms.anchors, keys, cross_cols, cfg.tau, None)?
    };

    if !cfg.use_within_modal_positives {
        return Ok(loss);
    }
    let second = terms
        .second_view
        .ok_or_else(|| Error::Contract("within-modal positives need a second clip per video".into()))?;
    if second.shape()[0] != n {
        return Err(Error::dim("cl_loss", format!("{} second views for {n} anchors", second.shape()[0])));
    }
    let mut pos_keys = key_rows(second, d, "second view")?;
    let extra = peer_bank.len() / d.max(1);
    pos_keys.extend(peer_bank);
    let positive = nce_against(terms.anchors, pos_keys, n + extra, cfg.tau, None)?;
    loss.add(&positive)
}
