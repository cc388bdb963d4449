//! Loop-based reference implementations for checking the fast paths.
//!
//! Everything here is written for clarity rather than speed: explicit index
//! loops, no im2col, no autodiff, no shared kernels with the production
//! tensor code. The oracles are meant for micro-scale models only (at most
//! [`MICRO_MAX_PARAMS`] trainable parameters and every input and feature
//! grid axis at most [`MICRO_MAX_EXTENT`]); the pipeline oracle refuses
//! anything larger.

use std::collections::BTreeMap;

use crate::encoders::{BlockConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, Norm, NormKind};
use crate::model::{AvBatch, CmacModel, ModelConfig};
use crate::pcf::{NormMode, PcfConfig};
use crate::contrastive::ContrastiveConfig;
use crate::tensor::{Precision, Tensor};

pub const MICRO_MAX_PARAMS: usize = 300;
pub const MICRO_MAX_EXTENT: usize = 8;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return Err(Error::Contract(format!(
            "kernel {kernel} does not fit input {input} with padding {pad} and stride {stride}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Direct 3-d convolution. `x [N, Ci, T, H, W]`, `w [Co, Ci, kT, kH, kW]`.
pub fn naive_conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<(Vec<f64>, [usize; 5])> {
    let [n, ci, t, h, wd] = xs;
    let [co, wci, kt, kh, kw] = ws;
    if wci != ci || x.len() != xs.iter().product::<usize>() || w.len() != ws.iter().product::<usize>() {
        return Err(Error::Contract(format!("naive_conv3d: input {xs:?} against kernel {ws:?}")));
    }
    let ot = out_extent(t, kt, stride[0], pad[0])?;
    let oh = out_extent(h, kh, stride[1], pad[1])?;
    let ow = out_extent(wd, kw, stride[2], pad[2])?;
    let mut y = vec![0.0; n * co * ot * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[o]);
                        for c in 0..ci {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = (zt * stride[0] + dt) as isize - pad[0] as isize;
                                        let ih = (zh * stride[1] + dh) as isize - pad[1] as isize;
                                        let iw = (zw * stride[2] + dw) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= t || ih >= h || iw >= wd {
                                            continue;
                                        }
                                        let xv = x[(((b * ci + c) * t + it) * h + ih) * wd + iw];
                                        let wv = w[(((o * ci + c) * kt + dt) * kh + dh) * kw + dw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[(((b * co + o) * ot + zt) * oh + zh) * ow + zw] = acc;
                    }
                }
            }
        }
    }
    Ok((y, [n, co, ot, oh, ow]))
}

/// Direct 2-d convolution. `x [N, Ci, H, W]`, `w [Co, Ci, kH, kW]`.
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<(Vec<f64>, [usize; 4])> {
    let [n, ci, h, wd] = xs;
    let [co, wci, kh, kw] = ws;
    if wci != ci || x.len() != xs.iter().product::<usize>() || w.len() != ws.iter().product::<usize>() {
        return Err(Error::Contract(format!("naive_conv2d: input {xs:?} against kernel {ws:?}")));
    }
    let oh = out_extent(h, kh, stride[0], pad[0])?;
    let ow = out_extent(wd, kw, stride[1], pad[1])?;
    let mut y = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..ci {
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let ih = (zh * stride[0] + dh) as isize - pad[0] as isize;
                                let iw = (zw * stride[1] + dw) as isize - pad[1] as isize;
                                if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= wd {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + ih as usize) * wd + iw as usize];
                                let wv = w[((o * ci + c) * kh + dh) * kw + dw];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((b * co + o) * oh + zh) * ow + zw] = acc;
                }
            }
        }
    }
    Ok((y, [n, co, oh, ow]))
}

/// Central-difference gradient of `f` at `theta`.
///
/// `f` is evaluated twice at `theta` first; if the two values are not
/// bit-identical the function is non-deterministic and no estimate is made.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }
    let first = f(theta)?;
    let second = f(theta)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {first:e} then {second:e} at the same point"
        )));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe)?;
        probe[i] = theta[i] - h;
        let down = f(&probe)?;
        probe[i] = theta[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Largest [`relative_error`] over two equally long slices.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_relative_error on slices of different length");
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i] * y[i];
    }
    acc
}

/// `exp(cos(x, y) / tau)`.
fn sim(x: &[f64], y: &[f64], tau: f64) -> f64 {
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    (dot(x, y) / (nx * ny).max(1e-12) / tau).exp()
}

/// `-(1/N) sum_n log[ sim(x_n, k_n) / (sum_m sim(x_n, k_m) + sum_j sim(x_n, b_j)) ]`.
pub fn brute_nce(anchors: &[Vec<f64>], keys: &[Vec<f64>], bank: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (n, x) in anchors.iter().enumerate() {
        let mut denom = 0.0;
        for k in keys {
            denom += sim(x, k, tau);
        }
        for b in bank {
            denom += sim(x, b, tau);
        }
        total -= (sim(x, &keys[n], tau) / denom).ln();
    }
    total / anchors.len() as f64
}

/// One direction of the contrastive objective, written out as sums.
///
/// The denominator holds the cross-modal keys and bank; within-modal
/// negatives add the same-modal target keys of every *other* clip in the
/// batch and the same-modal bank. Within-modal positives add a second term
/// whose positive is the anchor's second clip, with the other second clips
/// (and, when negatives are on, the same-modal bank) as negatives.
#[allow(clippy::too_many_arguments)]
pub fn brute_cl(
    anchors: &[Vec<f64>],
    cross_keys: &[Vec<f64>],
    cross_bank: &[Vec<f64>],
    peer_keys: &[Vec<f64>],
    peer_bank: &[Vec<f64>],
    second: Option<&[Vec<f64>]>,
    cfg: &ContrastiveConfig,
) -> f64 {
    let tau = cfg.tau;
    let mut total = 0.0;
    for (n, x) in anchors.iter().enumerate() {
        let mut denom = 0.0;
        for k in cross_keys.iter().chain(cross_bank) {
            denom += sim(x, k, tau);
        }
        if cfg.use_within_modal_negatives {
            for (m, k) in peer_keys.iter().enumerate() {
                if m != n {
                    denom += sim(x, k, tau);
                }
            }
            for b in peer_bank {
                denom += sim(x, b, tau);
            }
        }
        total -= (sim(x, &cross_keys[n], tau) / denom).ln();

        if cfg.use_within_modal_positives {
            let second = second.expect("second views required with within-modal positives");
            let mut denom = 0.0;
            for k in second {
                denom += sim(x, k, tau);
            }
            if cfg.use_within_modal_negatives {
                for b in peer_bank {
                    denom += sim(x, b, tau);
                }
            }
            total -= (sim(x, &second[n], tau) / denom).ln();
        }
    }
    total / anchors.len() as f64
}

/// `(1/|s|) sum_i (s_i - s_hat_i)^2`.
pub fn brute_mse(s: &[f64], s_hat: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.len() {
        acc += (s[i] - s_hat[i]) * (s[i] - s_hat[i]);
    }
    acc / s.len() as f64
}

/// Everything the brute-force objective reads. Embeddings are rows.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub online_v: Vec<Vec<f64>>,
    pub online_a: Vec<Vec<f64>>,
    pub target_v: Vec<Vec<f64>>,
    pub target_a: Vec<Vec<f64>>,
    pub second_v: Option<Vec<Vec<f64>>>,
    pub second_a: Option<Vec<Vec<f64>>>,
    pub bank_v: Vec<Vec<f64>>,
    pub bank_a: Vec<Vec<f64>>,
    pub s_v: Vec<f64>,
    pub s_hat_v: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s_hat_a: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteForceLosses {
    /// Plain cross-modal NCE, visual anchors against audio keys and bank.
    pub nce_va: f64,
    pub nce_av: f64,
    /// `nce_va + nce_av`.
    pub nce_sym: f64,
    pub cl_va: f64,
    pub cl_av: f64,
    pub ac_v: f64,
    pub ac_a: f64,
    /// `cl_va + cl_av + lambda * (ac_v + ac_a)`.
    pub total: f64,
}

pub fn brute_force_losses(inputs: &LossInputs, cfg: &ContrastiveConfig) -> BruteForceLosses {
    let i = inputs;
    let nce_va = brute_nce(&i.online_v, &i.target_a, &i.bank_a, cfg.tau);
    let nce_av = brute_nce(&i.online_a, &i.target_v, &i.bank_v, cfg.tau);
    let cl_va = brute_cl(&i.online_v, &i.target_a, &i.bank_a, &i.target_v, &i.bank_v, i.second_v.as_deref(), cfg);
    let cl_av = brute_cl(&i.online_a, &i.target_v, &i.bank_v, &i.target_a, &i.bank_a, i.second_a.as_deref(), cfg);
    let ac_v = brute_mse(&i.s_v, &i.s_hat_v);
    let ac_a = brute_mse(&i.s_a, &i.s_hat_a);
    BruteForceLosses {
        nce_va,
        nce_av,
        nce_sym: nce_va + nce_av,
        cl_va,
        cl_av,
        ac_v,
        ac_a,
        total: cl_va + cl_av + cfg.lambda * (ac_v + ac_a),
    }
}

/// A batch of feature maps `[N, C, dims...]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Fmap {
    pub n: usize,
    pub c: usize,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn new(n: usize, c: usize, dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * dims.iter().product::<usize>() {
            return Err(Error::Contract(format!("{} values for [{n}, {c}, {dims:?}]", data.len())));
        }
        Ok(Fmap {
            n,
            c,
            dims: dims.to_vec(),
            data,
        })
    }

    fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    fn at(&self, b: usize, ch: usize, p: usize) -> f64 {
        self.data[(b * self.c + ch) * self.cells() + p]
    }
}

fn unravel(mut p: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        idx[a] = p % dims[a];
        p /= dims[a];
    }
    idx
}

fn ravel(idx: &[usize], dims: &[usize]) -> usize {
    let mut p = 0;
    for a in 0..dims.len() {
        p = p * dims[a] + idx[a];
    }
    p
}

fn conv(x: &Fmap, w: &[f64], kernel: &[usize], co: usize, bias: Option<&[f64]>, stride: &[usize], pad: &[usize]) -> Result<Fmap> {
    match x.dims.len() {
        3 => {
            let d = &x.dims;
            let (y, s) = naive_conv3d(
                &x.data,
                [x.n, x.c, d[0], d[1], d[2]],
                w,
                [co, x.c, kernel[0], kernel[1], kernel[2]],
                bias,
                [stride[0], stride[1], stride[2]],
                [pad[0], pad[1], pad[2]],
            )?;
            Fmap::new(s[0], s[1], &s[2..], y)
        }
        2 => {
            let d = &x.dims;
            let (y, s) = naive_conv2d(
                &x.data,
                [x.n, x.c, d[0], d[1]],
                w,
                [co, x.c, kernel[0], kernel[1]],
                bias,
                [stride[0], stride[1]],
                [pad[0], pad[1]],
            )?;
            Fmap::new(s[0], s[1], &s[2..], y)
        }
        r => Err(Error::Contract(format!("reference conv supports 2-d and 3-d maps, got rank {r}"))),
    }
}

/// Per-channel normalization with batch or running statistics (biased
/// variance), then the affine map.
fn batch_norm(x: &Fmap, gamma: &[f64], beta: &[f64], running: Option<(&[f64], &[f64])>) -> Fmap {
    let s = x.cells();
    let count = (x.n * s) as f64;
    let mut y = x.clone();
    for ch in 0..x.c {
        let (mean, var) = match running {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mut sum = 0.0;
                for b in 0..x.n {
                    for p in 0..s {
                        sum += x.at(b, ch, p);
                    }
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for b in 0..x.n {
                    for p in 0..s {
                        sq += (x.at(b, ch, p) - mean) * (x.at(b, ch, p) - mean);
                    }
                }
                (mean, sq / count)
            }
        };
        let inv = 1.0 / (var + Norm::EPS).sqrt();
        for b in 0..x.n {
            for p in 0..s {
                y.data[(b * x.c + ch) * s + p] = gamma[ch] * (x.at(b, ch, p) - mean) * inv + beta[ch];
            }
        }
    }
    y
}

fn relu(mut x: Fmap) -> Fmap {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// Mean over grid positions: `[N, C]` rows.
fn pool(x: &Fmap) -> Vec<Vec<f64>> {
    let s = x.cells();
    (0..x.n)
        .map(|b| (0..x.c).map(|ch| (0..s).map(|p| x.at(b, ch, p)).sum::<f64>() / s as f64).collect())
        .collect()
}

/// Average over `2 x 2 (x 2)` blocks; trailing odd cells are dropped.
fn downsample(x: &Fmap) -> Fmap {
    let coarse: Vec<usize> = x.dims.iter().map(|d| d / 2).collect();
    let cs: usize = coarse.iter().product();
    let rank = x.dims.len();
    let weight = 1.0 / (1usize << rank) as f64;
    let mut out = vec![0.0; x.n * x.c * cs];
    for b in 0..x.n {
        for ch in 0..x.c {
            for q in 0..cs {
                let base = unravel(q, &coarse);
                let mut acc = 0.0;
                for corner in 0..(1usize << rank) {
                    let idx: Vec<usize> = (0..rank).map(|a| 2 * base[a] + ((corner >> (rank - 1 - a)) & 1)).collect();
                    acc += x.at(b, ch, ravel(&idx, &x.dims));
                }
                out[(b * x.c + ch) * cs + q] = acc * weight;
            }
        }
    }
    Fmap {
        n: x.n,
        c: x.c,
        dims: coarse,
        data: out,
    }
}

/// Filter response per sample and position, mapped into `[0, 1]`.
fn response(filter: &[Vec<f64>], x: &Fmap, mode: NormMode) -> Vec<Vec<f64>> {
    let s = x.cells();
    let mut out = Vec::with_capacity(x.n);
    for b in 0..x.n {
        let f = &filter[b];
        let nf = dot(f, f).sqrt();
        let mut raw = vec![0.0; s];
        for (p, r) in raw.iter_mut().enumerate() {
            let col: Vec<f64> = (0..x.c).map(|ch| x.at(b, ch, p)).collect();
            let d = dot(f, &col);
            *r = match mode {
                NormMode::Cosine => d / (nf * dot(&col, &col).sqrt()).max(1e-12),
                _ => d,
            };
        }
        let mapped = match mode {
            NormMode::Cosine => raw.iter().map(|r| (r + 1.0) / 2.0).collect(),
            NormMode::None => raw.iter().map(|r| r.clamp(0.0, 1.0)).collect(),
            NormMode::Softmax => {
                let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            }
        };
        out.push(mapped);
    }
    out
}

/// Pyramid of responses, each level upsampled to the full grid by nearest
/// neighbour (clamped at the border) and averaged. Rows are `[N][grid]`.
pub fn naive_pyramid(filter: &[Vec<f64>], x: &Fmap, cfg: &PcfConfig) -> Vec<Vec<f64>> {
    let grid = x.dims.clone();
    let s = x.cells();
    let mut fused = vec![vec![0.0; s]; x.n];
    let mut level_map = x.clone();
    for level in 0..cfg.scales {
        if level > 0 {
            level_map = downsample(&level_map);
        }
        let r = response(filter, &level_map, cfg.mode);
        let factor = 1usize << level;
        for b in 0..x.n {
            for p in 0..s {
                let idx = unravel(p, &grid);
                let src: Vec<usize> = (0..grid.len())
                    .map(|a| (idx[a] / factor).min(level_map.dims[a] - 1))
                    .collect();
                fused[b][p] += r[b][ravel(&src, &level_map.dims)];
            }
        }
    }
    for row in &mut fused {
        for v in row.iter_mut() {
            *v /= cfg.scales as f64;
        }
    }
    fused
}

/// Named parameter values, running statistics and bank contents of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveState {
    pub online: BTreeMap<String, Vec<f64>>,
    pub target: BTreeMap<String, Vec<f64>>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    pub target_buffers: BTreeMap<String, Vec<f64>>,
    pub bank_v: Vec<Vec<f64>>,
    pub bank_a: Vec<Vec<f64>>,
    pub trainable: usize,
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|r| r.to_vec()).collect()
}

impl NaiveState {
    pub fn from_model(model: &CmacModel) -> Self {
        let collect = |ps: Vec<&crate::optim::Parameter>| ps.iter().map(|p| (p.name.clone(), p.values())).collect();
        let bufs = |bs: Vec<(String, &Vec<f64>)>| bs.into_iter().map(|(n, b)| (n, b.clone())).collect();
        let d = model.config().embed_dim;
        NaiveState {
            online: collect(model.parameters()),
            target: collect(model.target_parameters()),
            buffers: bufs(model.buffers()),
            target_buffers: bufs(model.target_buffers()),
            bank_v: rows(&model.bank_v.entries(), d),
            bank_a: rows(&model.bank_a.entries(), d),
            trainable: model.num_parameters(),
        }
    }
}

/// Raw inputs: `visual [N, 3, T, H, W]` and `audio [N, 1, T~, F]`, flat.
#[derive(Clone, Debug)]
pub struct NaiveBatch {
    pub n: usize,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual_second: Option<Vec<f64>>,
    pub audio_second: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct NaiveOutput {
    /// Guided and predicted maps, `[N][grid cells]`.
    pub s_v: Vec<Vec<f64>>,
    pub s_a: Vec<Vec<f64>>,
    pub s_hat_v: Vec<Vec<f64>>,
    pub s_hat_a: Vec<Vec<f64>>,
    pub kappa_v: Vec<Vec<f64>>,
    pub kappa_a: Vec<Vec<f64>>,
    pub keys_v: Vec<Vec<f64>>,
    pub keys_a: Vec<Vec<f64>>,
    pub losses: BruteForceLosses,
}

fn param<'a>(map: &'a BTreeMap<String, Vec<f64>>, name: &str) -> Result<&'a [f64]> {
    map.get(name)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::Contract(format!("reference state lacks {name:?}")))
}

struct BranchRef<'a> {
    params: &'a BTreeMap<String, Vec<f64>>,
    buffers: &'a BTreeMap<String, Vec<f64>>,
    running: bool,
    norm: NormKind,
}

impl BranchRef<'_> {
    fn norm(&self, x: Fmap, prefix: &str) -> Result<Fmap> {
        if self.norm == NormKind::Identity {
            return Ok(x);
        }
        let gamma = param(self.params, &format!("{prefix}.gamma"))?;
        let beta = param(self.params, &format!("{prefix}.beta"))?;
        let running = if self.running {
            Some((
                param(self.buffers, &format!("{prefix}.running_mean"))?,
                param(self.buffers, &format!("{prefix}.running_var"))?,
            ))
        } else {
            None
        };
        Ok(batch_norm(&x, gamma, beta, running))
    }

    fn encode(&self, x: Fmap, tag: &str, enc: &EncoderConfig) -> Result<Fmap> {
        let mut x = x;
        for (i, BlockConfig { out_channels, kernel, stride, padding }) in enc.blocks.iter().enumerate() {
            let w = param(self.params, &format!("f_{tag}.block{i}.conv.weight"))?;
            x = conv(&x, w, kernel, *out_channels, None, stride, padding)?;
            x = relu(self.norm(x, &format!("f_{tag}.block{i}.norm"))?);
        }
        Ok(x)
    }

    fn transform(&self, feat: &Fmap, tag: &str, cf: usize) -> Result<Fmap> {
        let rank = feat.dims.len();
        let w = param(self.params, &format!("g_{tag}.conv.weight"))?;
        let y = conv(feat, w, &vec![1; rank], cf, None, &vec![1; rank], &vec![0; rank])?;
        self.norm(y, &format!("g_{tag}.norm"))
    }

    fn embed(&self, kappa: &[Vec<f64>], tag: &str, d: usize) -> Result<Vec<Vec<f64>>> {
        let w = param(self.params, &format!("proj_{tag}.weight"))?;
        let bias = param(self.params, &format!("proj_{tag}.bias"))?;
        let cf = kappa.first().map_or(0, |r| r.len());
        Ok(kappa
            .iter()
            .map(|k| {
                let z: Vec<f64> = (0..d).map(|o| bias[o] + dot(&w[o * cf..(o + 1) * cf], k)).collect();
                let norm = dot(&z, &z).sqrt().max(crate::contrastive::PROJECTION_EPS);
                z.iter().map(|v| v / norm).collect()
            })
            .collect())
    }

    /// Encoder features, transformed map, pooled filter and embedding.
    fn forward(&self, x: Fmap, tag: &str, enc: &EncoderConfig, cfg: &ModelConfig) -> Result<(Fmap, Fmap, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let feat = self.encode(x, tag, enc)?;
        let g = self.transform(&feat, tag, cfg.filter_channels)?;
        let kappa = pool(&g);
        let e = self.embed(&kappa, tag, cfg.embed_dim)?;
        Ok((feat, g, kappa, e))
    }
}

fn saliency(feat: &Fmap, tag: &str, params: &BTreeMap<String, Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let rank = feat.dims.len();
    let hidden = (feat.c / 2).max(1);
    let h = conv(
        feat,
        param(params, &format!("h_{tag}.conv0.weight"))?,
        &vec![3; rank],
        hidden,
        Some(param(params, &format!("h_{tag}.conv0.bias"))?),
        &vec![1; rank],
        &vec![1; rank],
    )?;
    let y = conv(
        &relu(h),
        param(params, &format!("h_{tag}.conv1.weight"))?,
        &vec![1; rank],
        1,
        Some(param(params, &format!("h_{tag}.conv1.bias"))?),
        &vec![1; rank],
        &vec![0; rank],
    )?;
    let s = y.cells();
    Ok((0..y.n)
        .map(|b| (0..s).map(|p| 1.0 / (1.0 + (-y.at(b, 0, p)).exp())).collect())
        .collect())
}

/// A tiny configuration (186 trainable parameters, `[2, 6, 6]` clips and
/// `[6, 4]` spectrograms onto `[2, 3, 3]` and `[3, 2]` grids) for the
/// reference checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        visual: EncoderConfig {
            in_channels: 3,
            input: vec![2, 6, 6],
            blocks: vec![BlockConfig {
                out_channels: 2,
                kernel: vec![1, 3, 3],
                stride: vec![1, 2, 2],
                padding: vec![0, 1, 1],
            }],
        },
        audio: EncoderConfig {
            in_channels: 1,
            input: vec![6, 4],
            blocks: vec![BlockConfig {
                out_channels: 2,
                kernel: vec![3, 3],
                stride: vec![2, 2],
                padding: vec![1, 1],
            }],
        },
        filter_channels: 2,
        embed_dim: 2,
        norm: NormKind::Batch,
        pcf: PcfConfig::default(),
        contrastive: ContrastiveConfig::default(),
        detach_guidance: true,
        momentum: 0.999,
        bank_capacity: 8,
        precision: Precision::F64,
    }
}

/// Uniform `[0, 1)` inputs shaped for `cfg`, with second views when the
/// configuration uses within-modal positives.
pub fn random_av_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Result<AvBatch> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |enc: &EncoderConfig| -> Result<Tensor> {
        let shape: Vec<usize> = [n, enc.in_channels].iter().chain(&enc.input).copied().collect();
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect();
        Tensor::new(data, &shape)
    };
    let mut batch = AvBatch::new(draw(&cfg.visual)?, draw(&cfg.audio)?);
    if cfg.contrastive.use_within_modal_positives {
        batch.visual_second = Some(draw(&cfg.visual)?);
        batch.audio_second = Some(draw(&cfg.audio)?);
    }
    Ok(batch)
}

/// Shift every trainable parameter by uniform noise in `[-scale, scale)`.
///
/// Fresh models sit on non-differentiable points: zero-initialized biases
/// put ReLU pre-activations exactly at 0 wherever the input window is all
/// zero, and there central differences measure the average of the two
/// one-sided slopes instead of the subgradient autodiff uses. Gradient
/// checks therefore start from a jittered, generic point.
pub fn jitter_parameters(model: &mut CmacModel, scale: f64, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in model.parameters_mut() {
        let v: Vec<f64> = p.values().iter().map(|x| x + rng.random_range(-scale..scale)).collect();
        p.set_values(&v)?;
    }
    Ok(())
}

/// Reject configurations or states beyond micro scale.
pub fn check_micro(cfg: &ModelConfig, trainable: usize) -> Result<()> {
    if trainable > MICRO_MAX_PARAMS {
        return Err(Error::Config(format!(
            "reference pipeline is limited to {MICRO_MAX_PARAMS} parameters, model has {trainable}"
        )));
    }
    let (_, vgrid) = cfg.visual.output_shape()?;
    let (_, agrid) = cfg.audio.output_shape()?;
    let extents = cfg.visual.input.iter().chain(&cfg.audio.input).chain(&vgrid).chain(&agrid);
    if let Some(e) = extents.copied().find(|&e| e > MICRO_MAX_EXTENT) {
        return Err(Error::Config(format!(
            "reference pipeline is limited to extents of {MICRO_MAX_EXTENT}, config has {e}"
        )));
    }
    if cfg.precision != Precision::F64 {
        return Err(Error::Config("reference pipeline runs in f64 only".into()));
    }
    Ok(())
}

/// The whole forward pass and objective, recomputed with loops from a
/// snapshot of the model. `Mode::Train` normalizes with batch statistics
/// and `Mode::Eval` with the stored running statistics.
pub fn naive_reference_pipeline(cfg: &ModelConfig, state: &NaiveState, batch: &NaiveBatch, mode: Mode) -> Result<NaiveOutput> {
    check_micro(cfg, state.trainable)?;
    let running = mode == Mode::Eval;
    let online = BranchRef {
        params: &state.online,
        buffers: &state.buffers,
        running,
        norm: cfg.norm,
    };
    let target = BranchRef {
        params: &state.target,
        buffers: &state.target_buffers,
        running,
        norm: cfg.norm,
    };
    let n = batch.n;
    let vmap = |data: &[f64]| Fmap::new(n, cfg.visual.in_channels, &cfg.visual.input, data.to_vec());
    let amap = |data: &[f64]| Fmap::new(n, cfg.audio.in_channels, &cfg.audio.input, data.to_vec());

    let (feat_v, g_v, kappa_v, e_v) = online.forward(vmap(&batch.visual)?, "v", &cfg.visual, cfg)?;
    let (feat_a, g_a, kappa_a, e_a) = online.forward(amap(&batch.audio)?, "a", &cfg.audio, cfg)?;
    let s_v = naive_pyramid(&kappa_a, &g_v, &cfg.pcf);
    let s_a = naive_pyramid(&kappa_v, &g_a, &cfg.pcf);
    let s_hat_v = saliency(&feat_v, "v", &state.online)?;
    let s_hat_a = saliency(&feat_a, "a", &state.online)?;

    let (_, _, _, keys_v) = target.forward(vmap(&batch.visual)?, "v", &cfg.visual, cfg)?;
    let (_, _, _, keys_a) = target.forward(amap(&batch.audio)?, "a", &cfg.audio, cfg)?;
    let (second_v, second_a) = if cfg.contrastive.use_within_modal_positives {
        let (Some(v2), Some(a2)) = (&batch.visual_second, &batch.audio_second) else {
            return Err(Error::Contract("within-modal positives need a second clip per video".into()));
        };
        (
            Some(target.forward(vmap(v2)?, "v", &cfg.visual, cfg)?.3),
            Some(target.forward(amap(a2)?, "a", &cfg.audio, cfg)?.3),
        )
    } else {
        (None, None)
    };

    let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
    let inputs = LossInputs {
        online_v: e_v,
        online_a: e_a,
        target_v: keys_v.clone(),
        target_a: keys_a.clone(),
        second_v,
        second_a,
        bank_v: state.bank_v.clone(),
        bank_a: state.bank_a.clone(),
        s_v: flat(&s_v),
        s_hat_v: flat(&s_hat_v),
        s_a: flat(&s_a),
        s_hat_a: flat(&s_hat_a),
    };
    let losses = brute_force_losses(&inputs, &cfg.contrastive);
    Ok(NaiveOutput {
        s_v,
        s_a,
        s_hat_v,
        s_hat_a,
        kappa_v,
        kappa_a,
        keys_v,
        keys_a,
        losses,
    })
}

/// Outcome of a finite-difference check over a set of parameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradReport {
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
}

/// Compare the autodiff gradient of the training objective on `batch`
/// against central differences, over every trainable parameter.
///
/// Guidance is only differentiated through when `detach_guidance` is off;
/// with it on, the autodiff gradient deliberately differs from the true
/// derivative of the loss value, so such configurations are rejected.
pub fn gradcheck_model(model: &mut CmacModel, batch: &AvBatch, h: f64) -> Result<GradReport> {
    if model.config().detach_guidance {
        return Err(Error::Config(
            "gradient check needs detach_guidance = false (detached guidance is not the loss derivative)".into(),
        ));
    }
    check_micro(model.config(), model.num_parameters())?;
    let saved_buffers: Vec<Vec<f64>> = model.buffers().into_iter().map(|(_, b)| b.clone()).collect();
    let names: Vec<(String, usize)> = model.parameters().iter().map(|p| (p.name.clone(), p.values().len())).collect();
    let theta: Vec<f64> = model.parameters().iter().flat_map(|p| p.values()).collect();

    model.zero_grad();
    let out = model.forward(batch, Mode::Train)?;
    out.total.backward()?;
    let analytic: Vec<f64> = model
        .parameters()
        .iter()
        .flat_map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.values().len()]))
        .collect();
    model.zero_grad();

    let load = |model: &mut CmacModel, values: &[f64]| -> Result<()> {
        let mut offset = 0;
        for p in model.parameters() {
            let n = p.values().len();
            p.set_values(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    };
    let numeric = finite_diff_grad(
        |t| {
            load(model, t)?;
            Ok(model.forward(batch, Mode::Train)?.total.item())
        },
        &theta,
        h,
    );
    load(model, &theta)?;
    for ((_, b), saved) in model.buffers_mut().into_iter().zip(saved_buffers) {
        *b = saved;
    }
    let numeric = numeric?;

    let mut worst = (0.0, String::new());
    let mut offset = 0;
    for (name, n) in &names {
        let e = max_relative_error(&analytic[offset..offset + n], &numeric[offset..offset + n]);
        if e >= worst.0 {
            worst = (e, name.clone());
        }
        offset += n;
    }
    Ok(GradReport {
        coordinates: theta.len(),
        max_relative_error: worst.0,
        worst: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_by_hand() {
        // 1x1x3x3 input, 1x1x2x2 ones kernel, no padding: sums of 2x2 windows.
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let (y, s) = naive_conv2d(&x, [1, 1, 3, 3], &[1.0; 4], [1, 1, 2, 2], Some(&[0.5]), [1, 1], [0, 0]).unwrap();
        assert_eq!(s, [1, 1, 2, 2]);
        assert_eq!(y, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn conv3d_matches_conv2d_on_unit_time() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| (i as f64 * 0.11).cos()).collect();
        let (y2, s2) = naive_conv2d(&x, [2, 2, 4, 5], &w, [3, 2, 3, 3], None, [2, 1], [1, 1]).unwrap();
        let (y3, s3) = naive_conv3d(&x, [2, 2, 1, 4, 5], &w, [3, 2, 1, 3, 3], None, [1, 2, 1], [0, 1, 1]).unwrap();
        assert_eq!(s2[2..], s3[3..]);
        assert_eq!(y2, y3);
    }

    #[test]
    fn finite_differences_of_a_polynomial() {
        let g = finite_diff_grad(|t| Ok(t[0] * t[0] * t[1] + t[1].powi(3)), &[1.5, -0.5], FD_STEP).unwrap();
        assert!(relative_error(g[0], 2.0 * 1.5 * -0.5) < 1e-8);
        assert!(relative_error(g[1], 1.5 * 1.5 + 3.0 * 0.25) < 1e-8);
    }

    #[test]
    fn finite_differences_reject_nondeterminism() {
        let mut calls = 0.0;
        let r = finite_diff_grad(
            |t| {
                calls += 1.0;
                Ok(t[0] + calls)
            },
            &[0.0],
            FD_STEP,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn brute_nce_two_orthogonal_pairs() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = brute_nce(&v, &v, &[], 1.0);
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn micro_config_fits_the_caps() {
        let cfg = micro_config();
        let model = CmacModel::new(&cfg, 0).unwrap();
        assert!(model.num_parameters() <= MICRO_MAX_PARAMS);
        check_micro(&cfg, model.num_parameters()).unwrap();
        assert!(check_micro(&ModelConfig::desk(), 10).is_err());
        assert!(check_micro(&cfg, MICRO_MAX_PARAMS + 1).is_err());
    }
}
