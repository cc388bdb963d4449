//! Elementwise, reduction and shape ops.

use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to `log` inputs.
pub const LOG_FLOOR: f64 = 1e-30;

impl Tensor {
    fn unary(
        &self,
        tag: &'static str,
        f: impl Fn(f64) -> f64,
        // d(out)/d(in) given (input, output)
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let x = self.to_vec();
        let data: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let saved = self.clone();
        Tensor::from_op(
            tag,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out, _| {
                let x = saved.data();
                let grad = g
                    .iter()
                    .zip(x.iter().zip(out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect());
                let gb = needs[1].then(|| g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + offset).collect();
        Tensor::from_op(
            "add_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log with inputs clamped to at least [`LOG_FLOOR`]; the
    /// gradient is zero where the clamp is active.
    pub fn log(&self) -> Tensor {
        self.unary(
            "log",
            |x| x.max(LOG_FLOOR).ln(),
            |x, _| if x >= LOG_FLOOR { 1.0 / x } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let shape = self.shape();
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "softmax",
            out,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![s],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "mean",
            vec![s / n as f64],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenate along axis 0.
    pub fn cat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("cat0 of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return Err(Error::dim("cat0", format!("{:?} vs {:?}", p.shape(), first.shape())));
            }
            rows += p.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            data.extend_from_slice(&p.data());
            sizes.push(p.numel());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_op(
            "cat0",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, _, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let part = need.then(|| g[offset..offset + n].to_vec());
                        offset += n;
                        part
                    })
                    .collect()
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
