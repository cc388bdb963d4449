//! Fused network ops with hand-written backward passes.

use super::Tensor;
use crate::error::{Error, Result};

/// Guard added to cosine denominators.
pub const COSINE_EPS: f64 = 1e-12;

fn require_feature_map(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 3 {
        return Err(Error::dim(
            op,
            format!("expected [N, C, spatial...], got {:?}", x.shape()),
        ));
    }
    let s = x.shape();
    let spatial: usize = s[2..].iter().product();
    if spatial == 0 {
        return Err(Error::dim(op, format!("empty spatial extent in {s:?}")));
    }
    Ok((s[0], s[1], spatial))
}

/// How [`batch_norm`] obtains per-channel statistics.
#[derive(Clone, Debug)]
pub enum BatchStats {
    /// Statistics of the current batch; gradients flow through them.
    Batch,
    /// Externally supplied (running) statistics, treated as constants.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel normalization of `[N, C, spatial...]` followed by the affine
/// `gamma * x_hat + beta`. Returns the output and the `(mean, var)` used.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BatchStats,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, s) = require_feature_map("batch_norm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "batch_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let xd = x.data();
    let count = (n * s) as f64;
    let (mean, var) = match stats {
        BatchStats::Batch => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += xd[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
                }
                let m = acc / count;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += xd[(b * c + ch) * s..(b * c + ch + 1) * s]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            (mean, var)
        }
        BatchStats::Fixed { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::dim("batch_norm", format!("running stats sized for {} channels", mean.len())));
            }
            (mean.clone(), var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.to_vec(), beta.to_vec());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            for i in r {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gd[ch] * h + bd[ch];
            }
        }
    }
    drop(xd);
    let through_stats = matches!(stats, BatchStats::Batch);
    let inv = inv_std.clone();
    let y = Tensor::from_op(
        "batch_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, needs| {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for ch in 0..c {
                    let scale = gd[ch] * inv[ch];
                    // With batch statistics the mean and variance depend on x.
                    let (mean_g, mean_gx) = if through_stats {
                        (dbeta[ch] / count, dgamma[ch] / count)
                    } else {
                        (0.0, 0.0)
                    };
                    for b in 0..n {
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            dx[i] = scale * (g[i] - mean_g - xhat[i] * mean_gx);
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }),
    );
    Ok((y, mean, var))
}

/// Mean over all spatial positions: `[N, C, s...] -> [N, C, 1...]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, s) = require_feature_map("global_avg_pool", x)?;
    let xd = x.data();
    let out: Vec<f64> = xd.chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
    drop(xd);
    let mut shape = vec![n, c];
    shape.extend(std::iter::repeat_n(1, x.rank() - 2));
    Ok(Tensor::from_op(
        "global_avg_pool",
        out,
        shape,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let inv = 1.0 / s as f64;
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, s)).collect())]
        }),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// For every spatial position of `fine`, the index of its coarse cell under
/// a factor-`factor` block map (clamped at the coarse border), or `None`
/// when the position falls outside every coarse block.
fn block_map(fine: &[usize], coarse: &[usize], factor: usize, clamp: bool) -> Vec<Option<usize>> {
    let fine_n: usize = fine.iter().product();
    let cst = strides(coarse);
    let fst = strides(fine);
    (0..fine_n)
        .map(|flat| {
            let mut idx = 0;
            for ax in 0..fine.len() {
                let p = (flat / fst[ax]) % fine[ax];
                let mut q = p / factor;
                if q >= coarse[ax] {
                    if !clamp {
                        return None;
                    }
                    q = coarse[ax] - 1;
                }
                idx += q * cst[ax];
            }
            Some(idx)
        })
        .collect()
}

/// Halve every spatial axis by 2x average pooling; odd trailing rows drop.
pub fn downsample_avg2(x: &Tensor) -> Result<Tensor> {
    let (n, c, s) = require_feature_map("downsample_avg2", x)?;
    let fine = x.shape()[2..].to_vec();
    let coarse: Vec<usize> = fine.iter().map(|v| v / 2).collect();
    if coarse.contains(&0) {
        return Err(Error::dim(
            "downsample_avg2",
            format!("spatial extent {fine:?} too small to halve"),
        ));
    }
    let cs: usize = coarse.iter().product();
    let map = block_map(&fine, &coarse, 2, false);
    let weight = 1.0 / (1usize << fine.len()) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c * cs];
    for plane in 0..n * c {
        let src = &xd[plane * s..(plane + 1) * s];
        let dst = &mut out[plane * cs..(plane + 1) * cs];
        for (p, m) in map.iter().enumerate() {
            if let Some(q) = m {
                dst[*q] += src[p] * weight;
            }
        }
    }
    drop(xd);
    let mut shape = vec![n, c];
    shape.extend_from_slice(&coarse);
    Ok(Tensor::from_op(
        "downsample_avg2",
        out,
        shape,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; n * c * s];
            for plane in 0..n * c {
                for (p, m) in map.iter().enumerate() {
                    if let Some(q) = m {
                        dx[plane * s + p] = g[plane * cs + q] * weight;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Nearest-neighbour upsampling of `[N, C, s...]` onto `[N, C, target...]`,
/// reading source cell `min(p / factor, s - 1)` along each axis.
pub fn upsample_nearest(x: &Tensor, factor: usize, target: &[usize]) -> Result<Tensor> {
    let (n, c, s) = require_feature_map("upsample_nearest", x)?;
    let coarse = x.shape()[2..].to_vec();
    if target.len() != coarse.len() || factor == 0 {
        return Err(Error::dim(
            "upsample_nearest",
            format!("cannot map {coarse:?} onto {target:?} with factor {factor}"),
        ));
    }
    let ts: usize = target.iter().product();
    let map = block_map(target, &coarse, factor, true);
    let xd = x.data();
    let mut out = vec![0.0; n * c * ts];
    for plane in 0..n * c {
        for (p, m) in map.iter().enumerate() {
            out[plane * ts + p] = xd[plane * s + m.expect("clamped map")];
        }
    }
    drop(xd);
    let mut shape = vec![n, c];
    shape.extend_from_slice(target);
    Ok(Tensor::from_op(
        "upsample_nearest",
        out,
        shape,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; n * c * s];
            for plane in 0..n * c {
                for (p, m) in map.iter().enumerate() {
                    dx[plane * s + m.expect("clamped map")] += g[plane * ts + p];
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// `x [N, I] * w[O, I]^T + b[O]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim(
            "linear",
            format!("input {:?} against weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, i_dim) = (x.shape()[0], x.shape()[1]);
    let o_dim = w.shape()[0];
    if let Some(b) = b {
        if b.shape() != [o_dim] {
            return Err(Error::dim("linear", format!("bias {:?} for {o_dim} outputs", b.shape())));
        }
    }
    let mut out = vec![0.0; n * o_dim];
    {
        let (xd, wd) = (x.data(), w.data());
        let bd = b.map(|b| b.to_vec());
        for r in 0..n {
            let xr = &xd[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &wd[o * i_dim..(o + 1) * i_dim];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                out[r * o_dim + o] = dot + bd.as_ref().map_or(0.0, |b| b[o]);
            }
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (xs, ws) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    Ok(Tensor::from_op(
        "linear",
        out,
        vec![n, o_dim],
        parents,
        Box::new(move |g, _, needs| {
            let (xd, wd) = (xs.data(), ws.data());
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; n * i_dim];
                for r in 0..n {
                    for o in 0..o_dim {
                        let gv = g[r * o_dim + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, w) in dx[r * i_dim..(r + 1) * i_dim].iter_mut().zip(&wd[o * i_dim..(o + 1) * i_dim]) {
                            *d += gv * w;
                        }
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; o_dim * i_dim];
                for r in 0..n {
                    for o in 0..o_dim {
                        let gv = g[r * o_dim + o];
                        for (d, xv) in dw[o * i_dim..(o + 1) * i_dim].iter_mut().zip(&xd[r * i_dim..(r + 1) * i_dim]) {
                            *d += gv * xv;
                        }
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0; o_dim];
                    for r in 0..n {
                        for o in 0..o_dim {
                            db[o] += g[r * o_dim + o];
                        }
                    }
                    db
                }));
            }
            grads
        }),
    ))
}

/// Row-wise `x / max(||x||, eps)`. Rows whose norm falls below `eps` are
/// reported as degenerate; an all-zero row maps to zero.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<bool>)> {
    if x.rank() != 2 {
        return Err(Error::dim("l2_normalize_rows", format!("expected [N, D], got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let norms: Vec<f64> = xd.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let degenerate: Vec<bool> = norms.iter().map(|&v| v < eps).collect();
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let denom = norms[r].max(eps);
        for k in 0..d {
            out[r * d + k] = xd[r * d + k] / denom;
        }
    }
    drop(xd);
    let flags = degenerate.clone();
    let y = Tensor::from_op(
        "l2_normalize_rows",
        out,
        vec![n, d],
        vec![x.clone()],
        Box::new(move |g, y, _| {
            let mut dx = vec![0.0; n * d];
            for r in 0..n {
                let row = r * d..(r + 1) * d;
                if flags[r] {
                    for k in row {
                        dx[k] = g[k] / eps;
                    }
                    continue;
                }
                let dot: f64 = row.clone().map(|k| g[k] * y[k]).sum();
                for k in row {
                    dx[k] = (g[k] - y[k] * dot) / norms[r];
                }
            }
            vec![Some(dx)]
        }),
    );
    Ok((y, degenerate))
}

/// Response of one filter per sample at every grid position:
/// `filter [N, C]` against `fmap [N, C, s...]` gives `[N, s...]`.
///
/// With `cosine` the response is `dot / max(|f| |x_p|, eps)`, so it lies in
/// `[-1, 1]`, a zero vector on either side yields 0, and rescaling either
/// side by a positive factor leaves it unchanged (while `|f| |x_p| >= eps`).
/// Otherwise it is the raw dot product.
pub fn correlate(filter: &Tensor, fmap: &Tensor, cosine: bool) -> Result<Tensor> {
    let (n, c, s) = require_feature_map("correlate", fmap)?;
    if filter.shape() != [n, c] {
        return Err(Error::dim(
            "correlate",
            format!("filter {:?} against feature map {:?}", filter.shape(), fmap.shape()),
        ));
    }
    let (fd, xd) = (filter.to_vec(), fmap.to_vec());
    let fnorm: Vec<f64> = fd.chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut xnorm = vec![0.0; n * s];
    let mut dots = vec![0.0; n * s];
    for b in 0..n {
        for ch in 0..c {
            let f = fd[b * c + ch];
            let plane = &xd[(b * c + ch) * s..(b * c + ch + 1) * s];
            for (p, &v) in plane.iter().enumerate() {
                dots[b * s + p] += f * v;
                xnorm[b * s + p] += v * v;
            }
        }
    }
    xnorm.iter_mut().for_each(|v| *v = v.sqrt());
    let out: Vec<f64> = if cosine {
        (0..n * s)
            .map(|i| dots[i] / (fnorm[i / s] * xnorm[i]).max(COSINE_EPS))
            .collect()
    } else {
        dots.clone()
    };
    let mut shape = vec![n];
    shape.extend_from_slice(&fmap.shape()[2..]);
    Ok(Tensor::from_op(
        if cosine { "correlate_cosine" } else { "correlate_dot" },
        out,
        shape,
        vec![filter.clone(), fmap.clone()],
        Box::new(move |g, _, needs| {
            let mut df = needs[0].then(|| vec![0.0; n * c]);
            let mut dx = needs[1].then(|| vec![0.0; n * c * s]);
            for b in 0..n {
                let nf = fnorm[b];
                for p in 0..s {
                    let i = b * s + p;
                    let gv = g[i];
                    if gv == 0.0 {
                        continue;
                    }
                    let nx = xnorm[i];
                    // r = dot * w; coefficients of f and x in dr/dx and dr/df
                    let (w, cf, cx) = if cosine {
                        let d = nf * nx;
                        if d < COSINE_EPS {
                            // Guarded branch: the denominator is a constant.
                            (1.0 / COSINE_EPS, 0.0, 0.0)
                        } else {
                            let k = dots[i] / (d * d);
                            (1.0 / d, k * nx / nf, k * nf / nx)
                        }
                    } else {
                        (1.0, 0.0, 0.0)
                    };
                    for ch in 0..c {
                        let f = fd[b * c + ch];
                        let x = xd[(b * c + ch) * s + p];
                        if let Some(df) = df.as_mut() {
                            df[b * c + ch] += gv * (x * w - f * cf);
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[(b * c + ch) * s + p] += gv * (f * w - x * cx);
                        }
                    }
                }
            }
            vec![df, dx]
        }),
    ))
}

/// `dot(x, y) / max(|x| |y|, 1e-12)` for two vectors of equal length. Two
/// zero vectors give 0 with zero gradient.
pub fn cosine_similarity(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || x.shape() != y.shape() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let d = x.shape()[0];
    let r = correlate(&x.reshape(&[1, d])?, &y.reshape(&[1, d, 1])?, true)?;
    r.reshape(&[])
}

/// Mean over rows of `-log softmax(logits[n, mask])[target_n]`, where the
/// softmax runs only over entries with `mask == true`.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[usize], mask: Option<&[bool]>) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::dim("masked_cross_entropy", format!("expected [N, M], got {:?}", logits.shape())));
    }
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 {
        return Err(Error::Contract("contrastive loss over an empty batch".into()));
    }
    if targets.len() != n {
        return Err(Error::dim("masked_cross_entropy", format!("{} targets for {n} rows", targets.len())));
    }
    let mask: Vec<bool> = match mask {
        Some(mk) if mk.len() != n * m => {
            return Err(Error::dim("masked_cross_entropy", format!("mask of {} for {n}x{m}", mk.len())));
        }
        Some(mk) => mk.to_vec(),
        None => vec![true; n * m],
    };
    for (r, &t) in targets.iter().enumerate() {
        if t >= m || !mask[r * m + t] {
            return Err(Error::Contract(format!("row {r}: positive column {t} is missing or masked")));
        }
    }
    let ld = logits.data();
    let mut probs = vec![0.0; n * m];
    let mut total = 0.0;
    for r in 0..n {
        let row = &ld[r * m..(r + 1) * m];
        let live = || (0..m).filter(|&k| mask[r * m + k]);
        let max = live().map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = live().map(|k| (row[k] - max).exp()).sum();
        for k in live() {
            probs[r * m + k] = (row[k] - max).exp() / z;
        }
        total += max + z.ln() - row[targets[r]];
    }
    drop(ld);
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        "masked_cross_entropy",
        vec![total / n as f64],
        Vec::new(),
        vec![logits.clone()],
        Box::new(move |g, _, _| {
            let scale = g[0] / n as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * m + t] -= scale;
            }
            vec![Some(d)]
        }),
    ))
}
