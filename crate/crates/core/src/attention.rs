//! Saliency heads and the attention-consistency loss.

use crate::error::{Error, Result};
use crate::layers::{init_rng, Conv, Module};
use crate::optim::Parameter;
use crate::pcf::{AttentionKind, AttentionMap};
use crate::tensor::{ConvSpec, Tensor};
use crate::Modality;

/// `conv(C -> C/2, 3) + ReLU + conv(C/2 -> 1, 1)`, predicting attention
/// logits from a single modality's feature map (`h_v`, `h_a`).
#[derive(Debug)]
pub struct SaliencyHead {
    hidden: Conv,
    out: Conv,
}

impl SaliencyHead {
    pub fn new(modality: Modality, channels: usize, spatial_rank: usize, seed: u64) -> Result<Self> {
        let prefix = match modality {
            Modality::Visual => "h_v",
            Modality::Audio => "h_a",
        };
        let hidden_ch = (channels / 2).max(1);
        let mut rng = init_rng(seed, modality.stream(2));
        let hidden = Conv::new(
            &format!("{prefix}.conv0"),
            channels,
            hidden_ch,
            &vec![3; spatial_rank],
            ConvSpec::new(&vec![1; spatial_rank], &vec![1; spatial_rank]),
            true,
            &mut rng,
        )?;
        let out = Conv::new(
            &format!("{prefix}.conv1"),
            hidden_ch,
            1,
            &vec![1; spatial_rank],
            ConvSpec::unit(spatial_rank),
            true,
            &mut rng,
        )?;
        Ok(SaliencyHead { hidden, out })
    }

    /// Zero every weight and bias; the head then predicts 0.5 everywhere.
    pub fn zero(&self) -> Result<()> {
        self.hidden.zero()?;
        self.out.zero()
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.in_channels()
    }

    /// Logits `[N, grid...]`.
    pub fn logits(&self, featmap: &Tensor) -> Result<Tensor> {
        if featmap.rank() < 3 || featmap.shape()[1] != self.in_channels() {
            return Err(Error::dim(
                "saliency_head",
                format!("expected {} channels, got {:?}", self.in_channels(), featmap.shape()),
            ));
        }
        let h = self.hidden.forward(featmap)?.relu();
        let y = self.out.forward(&h)?;
        let mut shape = vec![y.shape()[0]];
        shape.extend_from_slice(&y.shape()[2..]);
        y.reshape(&shape)
    }
}

impl Module for SaliencyHead {
    fn parameters(&self) -> Vec<&Parameter> {
        self.hidden.parameters().into_iter().chain(self.out.parameters()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.hidden
            .parameters_mut()
            .into_iter()
            .chain(self.out.parameters_mut())
            .collect()
    }
}

/// `sigmoid(h(featmap))`, strictly inside `(0, 1)`.
pub fn predict_attention(featmap: &Tensor, head: &SaliencyHead) -> Result<AttentionMap> {
    Ok(AttentionMap {
        values: head.logits(featmap)?.sigmoid(),
        kind: AttentionKind::Predicted,
    })
}

/// Mean squared difference between guided and predicted attention. With
/// `detach_guidance` the guided map is a constant target.
pub fn attention_consistency_loss(s: &AttentionMap, s_hat: &AttentionMap, detach_guidance: bool) -> Result<Tensor> {
    if s.values.shape() != s_hat.values.shape() {
        return Err(Error::dim(
            "attention_consistency_loss",
            format!("{:?} vs {:?}", s.values.shape(), s_hat.values.shape()),
        ));
    }
    let target = if detach_guidance { s.values.detach() } else { s.values.clone() };
    Ok(target.sub(&s_hat.values)?.square().mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: Vec<f64>, s: &[usize], kind: AttentionKind) -> AttentionMap {
        AttentionMap {
            values: Tensor::new(v, s).unwrap(),
            kind,
        }
    }

    #[test]
    fn zero_head_predicts_half() {
        let head = SaliencyHead::new(Modality::Visual, 32, 3, 0).unwrap();
        head.zero().unwrap();
        let feat = Tensor::new((0..32 * 2 * 8 * 8).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 32, 2, 8, 8]).unwrap();
        let a = predict_attention(&feat, &head).unwrap();
        assert_eq!(a.values.shape(), &[1, 2, 8, 8]);
        assert!(a.values.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn loss_cases() {
        let s = map(vec![1.0; 6], &[1, 2, 3], AttentionKind::Guided);
        let zero = map(vec![0.0; 6], &[1, 2, 3], AttentionKind::Predicted);
        assert_eq!(attention_consistency_loss(&s, &zero, true).unwrap().item(), 1.0);
        let same = map(vec![1.0; 6], &[1, 2, 3], AttentionKind::Predicted);
        assert_eq!(attention_consistency_loss(&s, &same, true).unwrap().item(), 0.0);
        let other = map(vec![1.0; 4], &[1, 4], AttentionKind::Predicted);
        assert!(attention_consistency_loss(&s, &other, true).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let head = SaliencyHead::new(Modality::Audio, 8, 2, 0).unwrap();
        assert!(head.logits(&Tensor::zeros(&[1, 4, 3, 3])).is_err());
    }
}
