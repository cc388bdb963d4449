//! Small convolutional stand-ins for the visual and audio backbones, and the
//! momentum-target pairing used to produce contrastive keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_rng, Conv, Mode, Module, Norm, NormKind};
use crate::optim::Parameter;
use crate::tensor::{ConvSpec, Tensor};
use crate::Modality;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl BlockConfig {
    fn new(out_channels: usize, kernel: &[usize], stride: &[usize], padding: &[usize]) -> Self {
        BlockConfig {
            out_channels,
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            padding: padding.to_vec(),
        }
    }
}

/// Input geometry and block schedule of one encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Spatial extent of one input sample: `[T, H, W]` or `[T~, F]`.
    pub input: Vec<usize>,
    pub blocks: Vec<BlockConfig>,
}

impl EncoderConfig {
    /// `3x8x32x32` clips to a `32x2x8x8` grid.
    pub fn desk_visual() -> Self {
        EncoderConfig {
            in_channels: 3,
            input: vec![8, 32, 32],
            blocks: vec![
                BlockConfig::new(16, &[2, 3, 3], &[2, 2, 2], &[0, 1, 1]),
                BlockConfig::new(32, &[2, 3, 3], &[2, 2, 2], &[0, 1, 1]),
                BlockConfig::new(32, &[1, 3, 3], &[1, 1, 1], &[0, 1, 1]),
            ],
        }
    }

    /// `1x64x32` spectrograms to a `32x8x4` grid.
    pub fn desk_audio() -> Self {
        EncoderConfig {
            in_channels: 1,
            input: vec![64, 32],
            blocks: vec![
                BlockConfig::new(16, &[3, 3], &[2, 2], &[1, 1]),
                BlockConfig::new(32, &[3, 3], &[2, 2], &[1, 1]),
                BlockConfig::new(32, &[3, 3], &[2, 2], &[1, 1]),
            ],
        }
    }

    pub fn spatial_rank(&self) -> usize {
        self.input.len()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Output `(channels, grid)` implied by the stride schedule.
    pub fn output_shape(&self) -> Result<(usize, Vec<usize>)> {
        let mut extent = self.input.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel.len() != extent.len() {
                return Err(Error::Config(format!(
                    "block {i}: kernel rank {} for {}-d input",
                    b.kernel.len(),
                    extent.len()
                )));
            }
            extent = ConvSpec::new(&b.stride, &b.padding).output_extent(&extent, &b.kernel)?;
        }
        Ok((self.out_channels(), extent))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if !(2..=3).contains(&self.spatial_rank()) {
            return Err(Error::Config(format!("encoder input rank {} unsupported", self.spatial_rank())));
        }
        let (_, grid) = self.output_shape()?;
        if grid.iter().any(|&g| g < 2) {
            return Err(Error::Config(format!(
                "encoder output grid {grid:?} must be at least 2 along every axis"
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Block {
    conv: Conv,
    norm: Norm,
}

/// Stack of conv + norm + ReLU blocks.
#[derive(Debug)]
pub struct ConvEncoder {
    modality: Modality,
    config: EncoderConfig,
    blocks: Vec<Block>,
}

/// Visual backbone `f_v`: `[N, 3, T, H, W] -> [N, C, T', H', W']`.
pub type VisualEncoder = ConvEncoder;
/// Audio backbone `f_a`: `[N, 1, T~, F] -> [N, C, T~', F']`.
pub type AudioEncoder = ConvEncoder;

impl ConvEncoder {
    pub fn new(modality: Modality, config: &EncoderConfig, norm: NormKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let prefix = match modality {
            Modality::Visual => "f_v",
            Modality::Audio => "f_a",
        };
        let mut rng = init_rng(seed, modality.stream(0));
        let mut in_ch = config.in_channels;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate() {
            let name = format!("{prefix}.block{i}");
            let conv = Conv::new(
                &format!("{name}.conv"),
                in_ch,
                b.out_channels,
                &b.kernel,
                ConvSpec::new(&b.stride, &b.padding),
                false,
                &mut rng,
            )?;
            let norm = Norm::new(&format!("{name}.norm"), b.out_channels, norm)?;
            blocks.push(Block { conv, norm });
            in_ch = b.out_channels;
        }
        Ok(ConvEncoder {
            modality,
            config: config.clone(),
            blocks,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Zero the last convolution, so a zero input maps to a zero feature map.
    pub fn zero_final_block(&self) -> Result<()> {
        self.blocks.last().expect("validated non-empty").conv.zero()
    }

    pub fn encode(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let expect_tail: Vec<usize> = std::iter::once(self.config.in_channels)
            .chain(self.config.input.iter().copied())
            .collect();
        if input.rank() != expect_tail.len() + 1 || input.shape()[1..] != expect_tail[..] {
            return Err(Error::dim(
                "encode",
                format!(
                    "{:?} encoder expects [N, {expect_tail:?}], got {:?}",
                    self.modality,
                    input.shape()
                ),
            ));
        }
        let mut x = input.clone();
        for b in &mut self.blocks {
            x = b.conv.forward(&x)?;
            x = b.norm.forward(&x, mode)?;
            x = x.relu();
        }
        Ok(x)
    }
}

impl Module for ConvEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        self.blocks
            .iter()
            .flat_map(|b| b.conv.parameters().into_iter().chain(b.norm.parameters()))
            .collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.conv.parameters_mut().into_iter().chain(b.norm.parameters_mut()))
            .collect()
    }
    fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        self.blocks.iter().flat_map(|b| b.norm.buffers()).collect()
    }
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.blocks.iter_mut().flat_map(|b| b.norm.buffers_mut()).collect()
    }
}

/// Online module plus a gradient-free target copy tracking it by
/// exponential moving average.
#[derive(Debug)]
pub struct MomentumPair<M: Module> {
    pub online: M,
    pub target: M,
    pub momentum: f64,
}

impl<M: Module> MomentumPair<M> {
    /// `target` must be built with the same configuration as `online`; its
    /// values are overwritten with the online ones and it is frozen.
    pub fn new(online: M, mut target: M, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        target.copy_state_from(&online)?;
        target.freeze();
        Ok(MomentumPair {
            online,
            target,
            momentum,
        })
    }

    /// `target <- m * target + (1 - m) * online`, elementwise.
    pub fn momentum_update(&mut self) -> Result<()> {
        let m = self.momentum;
        let online = self.online.parameters();
        let target = self.target.parameters();
        if online.len() != target.len() {
            return Err(Error::Contract("momentum pair modules diverged".into()));
        }
        for (t, o) in target.iter().zip(&online) {
            if t.shape() != o.shape() {
                return Err(Error::dim("momentum_update", format!("{}: {:?} vs {:?}", t.name, t.shape(), o.shape())));
            }
            let next: Vec<f64> = t
                .values()
                .iter()
                .zip(o.values())
                .map(|(tv, ov)| m * tv + (1.0 - m) * ov)
                .collect();
            t.set_values(&next)?;
        }
        Ok(())
    }
}
