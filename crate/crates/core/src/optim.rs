//! Named trainable parameters and momentum SGD.

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug)]
pub struct Parameter {
    pub name: String,
    tensor: Tensor,
    momentum_buffer: Option<Vec<f64>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::parameter(data, shape)?,
            momentum_buffer: None,
        })
    }

    /// The leaf handle to use in forward passes.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tensor.to_vec()
    }

    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        self.tensor.set_data(values)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    pub fn requires_grad(&self) -> bool {
        self.tensor.requires_grad()
    }

    /// Stop tracking gradients (momentum-target copies).
    pub fn freeze(&mut self) {
        self.tensor = self.tensor.clone().into_leaf(false);
        self.momentum_buffer = None;
    }

    /// Re-create the leaf at the given storage precision.
    pub fn set_precision(&mut self, precision: Precision) {
        self.tensor = self.tensor.clone().with_precision(precision);
    }

    pub fn momentum_buffer(&self) -> Option<&[f64]> {
        self.momentum_buffer.as_deref()
    }

    pub fn set_momentum_buffer(&mut self, buf: Option<Vec<f64>>) -> Result<()> {
        if let Some(b) = &buf {
            if b.len() != self.tensor.numel() {
                return Err(Error::dim(
                    "momentum_buffer",
                    format!("{}: {} values for {:?}", self.name, b.len(), self.shape()),
                ));
            }
        }
        self.momentum_buffer = buf;
        Ok(())
    }
}

/// One step of classic momentum SGD with L2 weight decay folded into the
/// gradient: `d = g + wd * w; buf = momentum * buf + d; w -= lr * buf`.
/// The first step seeds `buf = d`. Gradients are left in place.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    for p in params {
        let grad = p
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))?;
        let mut w = p.values();
        let d: Vec<f64> = grad.iter().zip(&w).map(|(g, w)| g + weight_decay * w).collect();
        let step = if momentum != 0.0 {
            let buf = match p.momentum_buffer.take() {
                Some(mut buf) => {
                    buf.iter_mut().zip(&d).for_each(|(b, d)| *b = momentum * *b + d);
                    buf
                }
                None => d,
            };
            p.momentum_buffer = Some(buf.clone());
            buf
        } else {
            d
        };
        w.iter_mut().zip(&step).for_each(|(w, s)| *w -= lr * s);
        p.set_values(&w)?;
    }
    Ok(())
}
