//! Building blocks shared by encoders and heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::{batch_norm, conv_nd, BatchStats, ConvSpec, Tensor};

/// Train mode normalizes with batch statistics and updates running
/// averages; eval mode reads the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalization after a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-channel batch statistics plus learned affine.
    #[default]
    Batch,
    /// Pass-through; no parameters, no statistics.
    Identity,
}

/// Anything holding named parameters and persistent buffers.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    /// Non-trainable state (running statistics), by name.
    fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        Vec::new()
    }

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    fn freeze(&mut self) {
        for p in self.parameters_mut() {
            p.freeze();
        }
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.values().len()).sum()
    }

    /// Copy parameter values and buffers from a structurally identical module.
    fn copy_state_from(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let src = other.parameters();
        let dst = self.parameters();
        if src.len() != dst.len() {
            return Err(Error::Contract("copy_state_from between mismatched modules".into()));
        }
        for (d, s) in dst.iter().zip(&src) {
            if d.shape() != s.shape() {
                return Err(Error::dim("copy_state_from", format!("{}: {:?} vs {:?}", d.name, d.shape(), s.shape())));
            }
            d.set_values(&s.values())?;
        }
        let src_bufs: Vec<Vec<f64>> = other.buffers().into_iter().map(|(_, b)| b.clone()).collect();
        for ((_, d), s) in self.buffers_mut().into_iter().zip(src_bufs) {
            *d = s;
        }
        Ok(())
    }
}

/// Deterministic generator for weight initialization.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Kaiming-uniform for a ReLU network: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Debug)]
pub struct Norm {
    kind: NormKind,
    gamma: Option<Parameter>,
    beta: Option<Parameter>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    prefix: String,
}

impl Norm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(prefix: &str, channels: usize, kind: NormKind) -> Result<Self> {
        let (gamma, beta) = match kind {
            NormKind::Batch => (
                Some(Parameter::new(format!("{prefix}.gamma"), vec![1.0; channels], &[channels])?),
                Some(Parameter::new(format!("{prefix}.beta"), vec![0.0; channels], &[channels])?),
            ),
            NormKind::Identity => (None, None),
        };
        Ok(Norm {
            kind,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            prefix: prefix.to_string(),
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (Some(gamma), Some(beta)) = (&self.gamma, &self.beta) else {
            return Ok(x.clone());
        };
        let stats = match mode {
            Mode::Train => BatchStats::Batch,
            Mode::Eval => BatchStats::Fixed {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            },
        };
        let (y, mean, var) = batch_norm(x, gamma.tensor(), beta.tensor(), &stats, Self::EPS)?;
        if mode == Mode::Train {
            let m = Self::MOMENTUM;
            for (r, v) in self.running_mean.iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.running_var.iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
        Ok(y)
    }
}

impl Module for Norm {
    fn parameters(&self) -> Vec<&Parameter> {
        self.gamma.iter().chain(self.beta.iter()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.gamma.iter_mut().chain(self.beta.iter_mut()).collect()
    }
    fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        match self.kind {
            NormKind::Batch => vec![
                (format!("{}.running_mean", self.prefix), &self.running_mean),
                (format!("{}.running_var", self.prefix), &self.running_var),
            ],
            NormKind::Identity => Vec::new(),
        }
    }
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        match self.kind {
            NormKind::Batch => vec![
                (format!("{}.running_mean", self.prefix), &mut self.running_mean),
                (format!("{}.running_var", self.prefix), &mut self.running_var),
            ],
            NormKind::Identity => Vec::new(),
        }
    }
}

/// Convolution with optional bias over 1-3 spatial axes.
#[derive(Debug)]
pub struct Conv {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub spec: ConvSpec,
}

impl Conv {
    /// Kaiming-uniform weights, zero bias.
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let mut shape = vec![out_channels, in_channels];
        shape.extend_from_slice(kernel);
        let weight = Parameter::new(
            format!("{prefix}.weight"),
            kaiming_uniform(rng, fan_in, out_channels * fan_in),
            &shape,
        )?;
        let bias = bias
            .then(|| Parameter::new(format!("{prefix}.bias"), vec![0.0; out_channels], &[out_channels]))
            .transpose()?;
        Ok(Conv { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_nd(x, self.weight.tensor(), self.bias.as_ref().map(Parameter::tensor), &self.spec)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Zero weights and bias.
    pub fn zero(&self) -> Result<()> {
        self.weight.set_values(&vec![0.0; self.weight.values().len()])?;
        if let Some(b) = &self.bias {
            b.set_values(&vec![0.0; b.values().len()])?;
        }
        Ok(())
    }
}

impl Module for Conv {
    fn parameters(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.iter()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight).chain(self.bias.iter_mut()).collect()
    }
}
