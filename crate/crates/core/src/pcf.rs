//! Adaptive cross-modal filters and pyramid correlation filtering.
//!
//! Each modality's transformed feature map is pooled into a filter; the
//! filter of one modality is then correlated against the transformed map of
//! the other, at full and successively halved resolution, to produce the
//! guided attention maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_rng, Conv, Mode, Module, Norm, NormKind};
use crate::optim::Parameter;
use crate::tensor::{correlate, downsample_avg2, global_avg_pool, upsample_nearest, ConvSpec, Tensor};
use crate::Modality;

/// How raw filter responses are mapped into `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Raw dot product, clamped.
    None,
    /// Softmax of raw dot products over every grid position.
    Softmax,
    /// Cosine response mapped affinely: `(r + 1) / 2`.
    #[default]
    Cosine,
}

impl NormMode {
    fn uses_cosine(self) -> bool {
        self == NormMode::Cosine
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "softmax" => Ok(NormMode::Softmax),
            "cosine" => Ok(NormMode::Cosine),
            other => Err(Error::Config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcfConfig {
    pub mode: NormMode,
    /// Number of pyramid levels, 1 to 3.
    pub scales: usize,
}

impl Default for PcfConfig {
    fn default() -> Self {
        PcfConfig {
            mode: NormMode::Cosine,
            scales: 2,
        }
    }
}

impl PcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.scales) {
            return Err(Error::Config(format!("pyramid scales {} not in 1..=3", self.scales)));
        }
        Ok(())
    }

    /// Check that a feature grid can be halved `scales - 1` times.
    pub fn check_grid(&self, grid: &[usize]) -> Result<()> {
        let mut g = grid.to_vec();
        for level in 1..self.scales {
            g.iter_mut().for_each(|v| *v /= 2);
            if g.contains(&0) {
                return Err(Error::Config(format!(
                    "grid {grid:?} too small for {} pyramid scales (level {level} collapses)",
                    self.scales
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Guided,
    Predicted,
}

/// Values in `[0, 1]` over a batch of feature grids, shape `[N, grid...]`.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub values: Tensor,
    pub kind: AttentionKind,
}

impl AttentionMap {
    pub fn grid(&self) -> &[usize] {
        &self.values.shape()[1..]
    }
}

/// Pooled filters, one row per sample: `[N, C_f]` each.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub kappa_v: Tensor,
    pub kappa_a: Tensor,
}

impl FilterBank {
    pub fn channels(&self) -> usize {
        self.kappa_v.shape()[1]
    }
}

/// Pointwise projection to the filter channel count plus normalization
/// (`g_v`, `g_a`). Grid extent is unchanged.
#[derive(Debug)]
pub struct Transform {
    conv: Conv,
    norm: Norm,
}

impl Transform {
    pub fn new(
        modality: Modality,
        in_channels: usize,
        filter_channels: usize,
        spatial_rank: usize,
        norm: NormKind,
        seed: u64,
    ) -> Result<Self> {
        let prefix = match modality {
            Modality::Visual => "g_v",
            Modality::Audio => "g_a",
        };
        let mut rng = init_rng(seed, modality.stream(1));
        let conv = Conv::new(
            &format!("{prefix}.conv"),
            in_channels,
            filter_channels,
            &vec![1; spatial_rank],
            ConvSpec::unit(spatial_rank),
            false,
            &mut rng,
        )?;
        let norm = Norm::new(&format!("{prefix}.norm"), filter_channels, norm)?;
        Ok(Transform { conv, norm })
    }

    /// Weight matrix `[C_f, C]` viewed as a pointwise kernel.
    pub fn weight(&self) -> &Parameter {
        &self.conv.weight
    }

    pub fn forward(&mut self, feat: &Tensor, mode: Mode) -> Result<Tensor> {
        if feat.rank() < 3 || feat.shape()[1] != self.conv.in_channels() {
            return Err(Error::dim(
                "transform",
                format!("expected {} channels, got {:?}", self.conv.in_channels(), feat.shape()),
            ));
        }
        let y = self.conv.forward(feat)?;
        self.norm.forward(&y, mode)
    }
}

impl Module for Transform {
    fn parameters(&self) -> Vec<&Parameter> {
        self.conv.parameters().into_iter().chain(self.norm.parameters()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.conv
            .parameters_mut()
            .into_iter()
            .chain(self.norm.parameters_mut())
            .collect()
    }
    fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        self.norm.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.norm.buffers_mut()
    }
}

fn pooled_filter(transformed: &Tensor) -> Result<Tensor> {
    let pooled = global_avg_pool(transformed)?;
    let (n, c) = (pooled.shape()[0], pooled.shape()[1]);
    pooled.reshape(&[n, c])
}

/// Filters from already-transformed maps: `kappa = pool(g(feat))`.
pub fn make_filters(v_transformed: &Tensor, a_transformed: &Tensor) -> Result<FilterBank> {
    if v_transformed.shape()[0] != a_transformed.shape()[0] || v_transformed.shape()[1] != a_transformed.shape()[1] {
        return Err(Error::dim(
            "make_filters",
            format!(
                "visual {:?} and audio {:?} disagree on batch or filter channels",
                v_transformed.shape(),
                a_transformed.shape()
            ),
        ));
    }
    Ok(FilterBank {
        kappa_v: pooled_filter(v_transformed)?,
        kappa_a: pooled_filter(a_transformed)?,
    })
}

/// Raw per-position response of `filter [N, C_f]` over `featmap [N, C_f, grid...]`.
pub fn correlate_filter(filter: &Tensor, featmap: &Tensor, mode: NormMode) -> Result<Tensor> {
    correlate(filter, featmap, mode.uses_cosine())
}

/// Map a raw `[N, grid...]` response into `[0, 1]`.
pub fn normalize_response(raw: &Tensor, mode: NormMode) -> Result<AttentionMap> {
    let values = match mode {
        NormMode::Cosine => raw.scale(0.5).add_scalar(0.5),
        NormMode::None => raw.clamp(0.0, 1.0),
        NormMode::Softmax => {
            let n = raw.shape()[0];
            let cells = raw.numel() / n.max(1);
            raw.reshape(&[n, cells])?.softmax(1)?.reshape(raw.shape())?
        }
    };
    Ok(AttentionMap {
        values,
        kind: AttentionKind::Guided,
    })
}

/// Normalized responses at full resolution and at each successive
/// half-resolution level, upsampled back by nearest neighbour and averaged.
pub fn pyramid_attention(filter: &Tensor, featmap: &Tensor, cfg: &PcfConfig) -> Result<AttentionMap> {
    cfg.validate()?;
    let grid = featmap.shape()[2..].to_vec();
    cfg.check_grid(&grid)?;
    let base = normalize_response(&correlate_filter(filter, featmap, cfg.mode)?, cfg.mode)?;
    if cfg.scales == 1 {
        return Ok(base);
    }
    let n = featmap.shape()[0];
    let with_channel = |t: &Tensor| -> Result<Tensor> {
        let mut s = vec![t.shape()[0], 1];
        s.extend_from_slice(&t.shape()[1..]);
        t.reshape(&s)
    };
    let mut fused = base.values;
    let mut level_map = featmap.clone();
    for level in 1..cfg.scales {
        level_map = downsample_avg2(&level_map)?;
        let coarse = normalize_response(&correlate_filter(filter, &level_map, cfg.mode)?, cfg.mode)?;
        let up = upsample_nearest(&with_channel(&coarse.values)?, 1 << level, &grid)?;
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&grid);
        fused = fused.add(&up.reshape(&out_shape)?)?;
    }
    Ok(AttentionMap {
        values: fused.scale(1.0 / cfg.scales as f64),
        kind: AttentionKind::Guided,
    })
}

/// Cross-direction guidance: the audio filter over the visual map gives
/// `s_v`, the visual filter over the audio map gives `s_a`.
pub fn guided_attention(
    v_transformed: &Tensor,
    a_transformed: &Tensor,
    filters: &FilterBank,
    cfg: &PcfConfig,
) -> Result<(AttentionMap, AttentionMap)> {
    let s_v = pyramid_attention(&filters.kappa_a, v_transformed, cfg)?;
    let s_a = pyramid_attention(&filters.kappa_v, a_transformed, cfg)?;
    Ok((s_v, s_a))
}
