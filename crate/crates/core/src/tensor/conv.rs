//! Batched cross-correlation over one to three spatial axes (no kernel flip).
//!
//! Everything is lowered to the 3-D case by prefixing unit axes, then run as
//! im2col followed by a row-major matrix product per sample.

use super::Tensor;
use crate::error::{Error, Result};

/// Stride and zero padding per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    pub fn new(stride: &[usize], padding: &[usize]) -> Self {
        ConvSpec {
            stride: stride.to_vec(),
            padding: padding.to_vec(),
        }
    }

    /// Unit stride, no padding.
    pub fn unit(rank: usize) -> Self {
        ConvSpec {
            stride: vec![1; rank],
            padding: vec![0; rank],
        }
    }

    /// Output extent along every spatial axis for the given input and kernel extents.
    pub fn output_extent(&self, input: &[usize], kernel: &[usize]) -> Result<Vec<usize>> {
        let rank = input.len();
        if kernel.len() != rank || self.stride.len() != rank || self.padding.len() != rank {
            return Err(Error::dim(
                "conv",
                format!(
                    "spatial rank {rank} but kernel {kernel:?}, stride {:?}, padding {:?}",
                    self.stride, self.padding
                ),
            ));
        }
        (0..rank)
            .map(|ax| {
                let span = input[ax] + 2 * self.padding[ax];
                if self.stride[ax] == 0 {
                    return Err(Error::Config(format!("zero stride on spatial axis {ax}")));
                }
                if span < kernel[ax] {
                    return Err(Error::dim(
                        "conv",
                        format!(
                            "spatial axis {ax}: padded extent {span} smaller than kernel {}",
                            kernel[ax]
                        ),
                    ));
                }
                Ok((span - kernel[ax]) / self.stride[ax] + 1)
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    ci: usize,
    co: usize,
    inp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn kc(&self) -> usize {
        self.ci * self.k.iter().product::<usize>()
    }
    fn p(&self) -> usize {
        self.out.iter().product()
    }
    fn in_len(&self) -> usize {
        self.ci * self.inp.iter().product::<usize>()
    }
    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

fn lift3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

/// Lay one sample out as a `[kc, p]` matrix.
fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let [it, ih, iw] = g.inp;
    let [kt, kh, kw] = g.k;
    let [ot, oh, ow] = g.out;
    let p = g.p();
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for t in 0..ot {
                        let st = (t * g.stride[0] + dt) as isize - g.pad[0] as isize;
                        for h in 0..oh {
                            let sh = (h * g.stride[1] + dh) as isize - g.pad[1] as isize;
                            let row_ok = st >= 0 && (st as usize) < it && sh >= 0 && (sh as usize) < ih;
                            for w in 0..ow {
                                let sw = (w * g.stride[2] + dw) as isize - g.pad[2] as isize;
                                dst[q] = if row_ok && sw >= 0 && (sw as usize) < iw {
                                    xc[((st as usize) * ih + sh as usize) * iw + sw as usize]
                                } else {
                                    0.0
                                };
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add a `[kc, p]` matrix back onto one sample's input layout.
fn col2im(cols: &[f64], g: &Geom, dx: &mut [f64]) {
    let [it, ih, iw] = g.inp;
    let [kt, kh, kw] = g.k;
    let [ot, oh, ow] = g.out;
    let p = g.p();
    let mut row = 0;
    for c in 0..g.ci {
        let base = c * it * ih * iw;
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for t in 0..ot {
                        let st = (t * g.stride[0] + dt) as isize - g.pad[0] as isize;
                        for h in 0..oh {
                            let sh = (h * g.stride[1] + dh) as isize - g.pad[1] as isize;
                            let row_ok = st >= 0 && (st as usize) < it && sh >= 0 && (sh as usize) < ih;
                            for w in 0..ow {
                                let sw = (w * g.stride[2] + dw) as isize - g.pad[2] as isize;
                                if row_ok && sw >= 0 && (sw as usize) < iw {
                                    dx[base + ((st as usize) * ih + sh as usize) * iw + sw as usize] += src[q];
                                }
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Dot product with independent lanes so the compiler can vectorize it.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

fn sample_cols<'a>(x: &'a [f64], g: &Geom, n: usize, scratch: &'a mut Vec<f64>) -> &'a [f64] {
    let xs = &x[n * g.in_len()..(n + 1) * g.in_len()];
    if g.is_pointwise() {
        xs
    } else {
        scratch.resize(g.kc() * g.p(), 0.0);
        im2col(xs, g, scratch);
        scratch
    }
}

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major, four rows of `c` at a time
/// so each row of `b` is streamed once per block.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const TILE: usize = 256;
    let mut row = 0;
    while row < m {
        let rows = (m - row).min(4);
        for j0 in (0..n).step_by(TILE) {
            let j1 = (j0 + TILE).min(n);
            let (c0, rest) = c[row * n..].split_at_mut(n);
            if rows == 4 {
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, rest) = rest.split_at_mut(n);
                let c3 = &mut rest[..n];
                let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
                for r in 0..k {
                    let (w0, w1, w2, w3) = (
                        a[row * k + r],
                        a[(row + 1) * k + r],
                        a[(row + 2) * k + r],
                        a[(row + 3) * k + r],
                    );
                    if w0 == 0.0 && w1 == 0.0 && w2 == 0.0 && w3 == 0.0 {
                        continue;
                    }
                    let brow = &b[r * n + j0..r * n + j1];
                    for (i, &bv) in brow.iter().enumerate() {
                        c0[i] += w0 * bv;
                        c1[i] += w1 * bv;
                        c2[i] += w2 * bv;
                        c3[i] += w3 * bv;
                    }
                }
            } else {
                for rr in 0..rows {
                    let crow = if rr == 0 { &mut c0[j0..j1] } else { &mut rest[(rr - 1) * n + j0..(rr - 1) * n + j1] };
                    for r in 0..k {
                        let w = a[(row + rr) * k + r];
                        if w == 0.0 {
                            continue;
                        }
                        for (o, &bv) in crow.iter_mut().zip(&b[r * n + j0..r * n + j1]) {
                            *o += w * bv;
                        }
                    }
                }
            }
        }
        row += rows;
    }
}

fn forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &Geom) -> Vec<f64> {
    let (kc, p) = (g.kc(), g.p());
    let mut out = vec![0.0; g.n * g.co * p];
    let mut scratch = Vec::new();
    for n in 0..g.n {
        let cols = sample_cols(x, g, n, &mut scratch);
        let on = &mut out[n * g.co * p..(n + 1) * g.co * p];
        if let Some(b) = bias {
            for (co, orow) in on.chunks_mut(p).enumerate() {
                orow.fill(b[co]);
            }
        }
        gemm_acc(k, cols, on, g.co, kc, p);
    }
    out
}

#[allow(clippy::type_complexity)]
fn backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    g: &Geom,
    need: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (kc, p) = (g.kc(), g.p());
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dk = need[1].then(|| vec![0.0; k.len()]);
    let db = need[2].then(|| {
        let mut db = vec![0.0; g.co];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (n * g.co + co) * p;
                *d += gout[off..off + p].iter().sum::<f64>();
            }
        }
        db
    });
    let mut scratch = Vec::new();
    let mut dcols = Vec::new();
    // Kernel transposed to `[kc, co]` for the input-gradient product.
    let kt: Vec<f64> = if need[0] {
        (0..kc).flat_map(|r| (0..g.co).map(move |co| k[co * kc + r])).collect()
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        let gn = &gout[n * g.co * p..(n + 1) * g.co * p];
        if let Some(dk) = dk.as_mut() {
            let cols = sample_cols(x, g, n, &mut scratch);
            for co in 0..g.co {
                let grow = &gn[co * p..(co + 1) * p];
                let drow = &mut dk[co * kc..(co + 1) * kc];
                for (r, d) in drow.iter_mut().enumerate() {
                    let crow = &cols[r * p..(r + 1) * p];
                    *d += dot(grow, crow);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(kc * p, 0.0);
            gemm_acc(&kt, gn, &mut dcols, kc, g.co, p);
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if g.is_pointwise() {
                dxn.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
            } else {
                col2im(&dcols, g, dxn);
            }
        }
    }
    (dx, dk, db)
}

/// Batched convolution: input `[N, C_in, s...]`, kernel `[C_out, C_in, k...]`,
/// optional bias `[C_out]`, with 1 to 3 spatial axes.
pub fn conv_nd(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let rank = input.rank();
    if !(3..=5).contains(&rank) || kernel.rank() != rank {
        return Err(Error::dim(
            "conv",
            format!(
                "input {:?} and kernel {:?} must both be [N|C_out, C, 1..=3 spatial axes]",
                input.shape(),
                kernel.shape()
            ),
        ));
    }
    let (is, ks) = (input.shape(), kernel.shape());
    if is[1] != ks[1] {
        return Err(Error::dim(
            "conv",
            format!("axis 1: input has {} channels, kernel expects {}", is[1], ks[1]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [ks[0]] {
            return Err(Error::dim("conv", format!("bias {:?} for {} output channels", b.shape(), ks[0])));
        }
    }
    let out_sp = spec.output_extent(&is[2..], &ks[2..])?;
    let g = Geom {
        n: is[0],
        ci: is[1],
        co: ks[0],
        inp: lift3(&is[2..], 1),
        k: lift3(&ks[2..], 1),
        stride: lift3(&spec.stride, 1),
        pad: lift3(&spec.padding, 0),
        out: lift3(&out_sp, 1),
    };
    let data = {
        let x = input.data();
        let k = kernel.data();
        let b = bias.map(|b| b.data());
        forward(&x, &k, b.as_deref().map(|v| v.as_slice()), &g)
    };
    let mut shape = vec![g.n, g.co];
    shape.extend_from_slice(&out_sp);

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (xi, ki) = (input.clone(), kernel.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        "conv",
        data,
        shape,
        parents,
        Box::new(move |gout, _, needs| {
            let need = [needs[0], needs[1], has_bias && needs[2]];
            let (dx, dk, db) = backward(&xi.data(), &ki.data(), gout, &g, need);
            let mut grads = vec![dx, dk];
            if has_bias {
                grads.push(db);
            }
            grads
        }),
    ))
}

fn unbatched_wrapper(input: &Tensor, kernel: &Tensor, spec: &ConvSpec, spatial: usize) -> Result<Tensor> {
    let rank = input.rank();
    if rank == spatial + 1 {
        let mut batched = vec![1];
        batched.extend_from_slice(input.shape());
        let out = conv_nd(&input.reshape(&batched)?, kernel, None, spec)?;
        let shape = out.shape()[1..].to_vec();
        out.reshape(&shape)
    } else if rank == spatial + 2 {
        conv_nd(input, kernel, None, spec)
    } else {
        Err(Error::dim(
            "conv",
            format!("expected rank {} or {} input, got {:?}", spatial + 1, spatial + 2, input.shape()),
        ))
    }
}

/// 3-D convolution over `[C, T, H, W]` or `[N, C, T, H, W]`.
pub fn conv3d(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    unbatched_wrapper(input, kernel, spec, 3)
}

/// 2-D convolution over `[C, H, W]` or `[N, C, H, W]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    unbatched_wrapper(input, kernel, spec, 2)
}
