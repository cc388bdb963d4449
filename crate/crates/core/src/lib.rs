//! Cross-modal attention consistency for audio-visual self-supervised
//! learning: autodiff tensors, small encoders, pyramid correlation
//! filtering, saliency heads, contrastive objectives, synthetic data, a
//! trainer and loop-based reference implementations.

pub mod attention;
pub mod contrastive;
pub mod encoders;
pub mod data;
pub mod error;
pub mod io;
pub mod layers;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pcf;
pub mod tensor;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use attention::{attention_consistency_loss, predict_attention, SaliencyHead};
pub use contrastive::{cl_loss, nce_loss, ContrastiveConfig, MemoryBank, ProjectionHead};
pub use encoders::{AudioEncoder, ConvEncoder, EncoderConfig, MomentumPair, VisualEncoder};
pub use error::{Error, Result};
pub use layers::{Mode, Module, NormKind};
pub use model::{AvBatch, CmacModel, ForwardOutput, LossBreakdown, ModelConfig};
pub use optim::{sgd_step, Parameter};
pub use pcf::{AttentionKind, AttentionMap, FilterBank, NormMode, PcfConfig};
pub use tensor::{Precision, Tensor};

/// The two input streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Visual => Modality::Audio,
            Modality::Audio => Modality::Visual,
        }
    }

    /// Distinct RNG stream id for submodule `k` of this modality.
    pub fn stream(self, k: u64) -> u64 {
        let base = match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        };
        k * 2 + base
    }
}
