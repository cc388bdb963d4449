//! Frozen-model evaluation: localization against planted regions, linear
//! probes on pooled features, and attention-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{augment_audio, augment_visual, band_grid_mask, grid_mask, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{AvBatch, CmacModel};
use crate::tensor::Tensor;
use crate::Modality;

/// Centre-cropped, un-augmented batch plus the cropped pixel masks.
pub fn eval_batch(ds: &Dataset, indices: &[usize], crop: usize) -> Result<(AvBatch, Vec<Vec<bool>>)> {
    let p = &ds.params;
    let aug = AugmentConfig::eval(crop);
    let mut vis = Vec::new();
    let mut aud = Vec::new();
    let mut masks = Vec::new();
    for &i in indices {
        let pair = &ds.pairs[i];
        let v = augment_visual(&pair.clip, &pair.region, p, &aug, 0)?;
        vis.extend(v.clip);
        masks.push(v.region);
        aud.extend(augment_audio(&pair.spec, p, &aug, 0)?);
    }
    let n = indices.len();
    Ok((
        AvBatch::new(
            Tensor::new(vis, &[n, 3, p.frames, crop, crop])?,
            Tensor::new(aud, &[n, 1, p.spec_time, p.spec_freq])?,
        ),
        masks,
    ))
}

/// Localization scores of one attention type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocStats {
    /// Mean attention inside the region divided by mean attention outside.
    pub mass_ratio: f64,
    /// Fraction of frames whose argmax cell lies in the region.
    pub pointing: f64,
    /// Mean fraction of cells in the region (pointing-game chance level).
    pub chance: f64,
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct LocAccumulator {
    sum_in: f64,
    n_in: usize,
    sum_out: f64,
    n_out: usize,
    hits: usize,
    frames: usize,
    area: f64,
}

impl LocAccumulator {
    /// `map` and `mask` are `[frames, cells]` row-major.
    fn add(&mut self, map: &[f64], mask: &[bool], cells: usize) {
        for (frame, mrow) in map.chunks(cells).zip(mask.chunks(cells)) {
            let mut best = 0;
            for (i, (&a, &m)) in frame.iter().zip(mrow).enumerate() {
                if m {
                    self.sum_in += a;
                    self.n_in += 1;
                } else {
                    self.sum_out += a;
                    self.n_out += 1;
                }
                if a > frame[best] {
                    best = i;
                }
            }
            self.hits += mrow[best] as usize;
            self.frames += 1;
            self.area += mrow.iter().filter(|&&m| m).count() as f64 / cells as f64;
        }
    }

    fn finish(&self) -> LocStats {
        let mean_in = self.sum_in / self.n_in.max(1) as f64;
        let mean_out = self.sum_out / self.n_out.max(1) as f64;
        LocStats {
            mass_ratio: mean_in / mean_out,
            pointing: self.hits as f64 / self.frames.max(1) as f64,
            chance: self.area / self.frames.max(1) as f64,
            frames: self.frames,
        }
    }
}

/// Scores for maps and masks laid out as `[frames, cells]`. Ties in the
/// argmax go to the first cell.
pub fn localization_stats(map: &[f64], mask: &[bool], cells: usize) -> Result<LocStats> {
    if map.len() != mask.len() || cells == 0 || map.len() % cells != 0 || map.is_empty() {
        return Err(Error::dim("localization", format!("{} values, {} mask cells, {cells} per frame", map.len(), mask.len())));
    }
    let mut acc = LocAccumulator::default();
    acc.add(map, mask, cells);
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub visual_guided: LocStats,
    pub visual_predicted: LocStats,
    pub audio_guided: LocStats,
    pub audio_predicted: LocStats,
}

/// Visual frames are time slices of the feature grid (cells over `H' x W'`);
/// audio frames are grid time rows (cells over `F'`, region = band).
pub fn eval_localization(model: &mut CmacModel, ds: &Dataset, batch: usize) -> Result<LocalizationReport> {
    if ds.is_empty() {
        return Err(Error::Contract("localization over an empty dataset".into()));
    }
    let cfg = model.config().clone();
    let crop = cfg.visual.input[1];
    let (_, vgrid) = cfg.visual.output_shape()?;
    let (_, agrid) = cfg.audio.output_shape()?;
    let vcells = vgrid[1] * vgrid[2];
    let acells = agrid[1];
    let mut acc = [LocAccumulator::default(); 4];
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (b, masks) = eval_batch(ds, chunk, crop)?;
        let att = model.attention(&b, Mode::Eval)?;
        let (sv, shv, sa, sha) = (
            att.s_v.values.to_vec(),
            att.s_hat_v.values.to_vec(),
            att.s_a.values.to_vec(),
            att.s_hat_a.values.to_vec(),
        );
        let vn: usize = vgrid.iter().product();
        let an: usize = agrid.iter().product();
        for (j, &i) in chunk.iter().enumerate() {
            let vm = grid_mask(&masks[j], &cfg.visual.input, &vgrid)?;
            let am = band_grid_mask(ds.pairs[i].band, ds.params.spec_freq, &agrid)?;
            acc[0].add(&sv[j * vn..(j + 1) * vn], &vm, vcells);
            acc[1].add(&shv[j * vn..(j + 1) * vn], &vm, vcells);
            acc[2].add(&sa[j * an..(j + 1) * an], &am, acells);
            acc[3].add(&sha[j * an..(j + 1) * an], &am, acells);
        }
    }
    Ok(LocalizationReport {
        visual_guided: acc[0].finish(),
        visual_predicted: acc[1].finish(),
        audio_guided: acc[2].finish(),
        audio_predicted: acc[3].finish(),
    })
}

/// Globally pooled encoder features, one row per pair.
pub fn extract_features(model: &mut CmacModel, modality: Modality, ds: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let crop = model.config().visual.input[1];
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(ds.len());
    for chunk in indices.chunks(batch.max(1)) {
        let (b, _) = eval_batch(ds, chunk, crop)?;
        let x = match modality {
            Modality::Visual => &b.visual,
            Modality::Audio => &b.audio,
        };
        let f = model.pooled_features(modality, x, Mode::Eval)?;
        let c = f.len() / chunk.len();
        rows.extend(f.chunks(c).map(|r| r.to_vec()));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Train on randomly permuted labels (chance-level control).
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            lr: 0.5,
            l2: 1e-3,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub chance: f64,
}

struct SoftmaxRegression {
    w: Vec<f64>,
    classes: usize,
    dim: usize,
}

impl SoftmaxRegression {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let row = &self.w[k * (self.dim + 1)..(k + 1) * (self.dim + 1)];
                row[self.dim] + row[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..self.classes).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    }

    /// Full-batch gradient descent on the L2-regularized cross-entropy.
    fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, cfg: &ProbeConfig) -> Self {
        let dim = xs.first().map_or(0, |x| x.len());
        let mut m = SoftmaxRegression {
            w: vec![0.0; classes * (dim + 1)],
            classes,
            dim,
        };
        let n = xs.len() as f64;
        for _ in 0..cfg.iterations {
            let mut grad = vec![0.0; m.w.len()];
            for (x, &y) in xs.iter().zip(ys) {
                let l = m.logits(x);
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..classes {
                    let d = e[k] / z - (k == y) as u8 as f64;
                    let g = &mut grad[k * (dim + 1)..(k + 1) * (dim + 1)];
                    for (gi, xi) in g[..dim].iter_mut().zip(x) {
                        *gi += d * xi / n;
                    }
                    g[dim] += d / n;
                }
            }
            for (k, (w, g)) in m.w.iter_mut().zip(&grad).enumerate() {
                let decay = if k % (dim + 1) == dim { 0.0 } else { cfg.l2 * *w };
                *w -= cfg.lr * (g + decay);
            }
        }
        m
    }
}

fn standardize(train: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = train.first().map_or(0, |r| r.len());
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| (train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    rows.iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect())
        .collect()
}

/// Fit a linear classifier on frozen pooled features of `train` and report
/// top-1 accuracy on `train` and `test`.
pub fn linear_probe(
    model: &mut CmacModel,
    modality: Modality,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("linear probe needs non-empty train and test sets".into()));
    }
    let classes = train.params.classes;
    let ftrain = extract_features(model, modality, train, 32)?;
    let ftest = extract_features(model, modality, test, 32)?;
    let xtrain = standardize(&ftrain, &ftrain);
    let xtest = standardize(&ftrain, &ftest);
    let mut ytrain = train.class_ids();
    if cfg.shuffle_labels {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        ytrain.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed));
    }
    let clf = SoftmaxRegression::fit(&xtrain, &ytrain, classes, cfg);
    let acc = |xs: &[Vec<f64>], ys: &[usize]| {
        xs.iter().zip(ys).filter(|(x, &y)| clf.predict(x) == y).count() as f64 / xs.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: acc(&xtrain, &ytrain),
        test_accuracy: acc(&xtest, &test.class_ids()),
        chance: 1.0 / classes as f64,
    })
}

/// Write a grid as text: a `shape` header line, then one value per line in
/// shortest round-trip form.
pub fn write_grid(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::dim("write_grid", format!("{} values for shape {shape:?}", values.len())));
    }
    let mut s = String::from("shape");
    for d in shape {
        write!(s, " {d}").expect("write to string");
    }
    s.push('\n');
    for v in values {
        writeln!(s, "{v:?}").expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let bad = |d: String| Error::format("grid", path, d);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("shape") {
        return Err(bad("missing shape header".into()));
    }
    let shape: Vec<usize> = parts.map(|p| p.parse().map_err(|_| bad(format!("bad extent {p:?}")))).collect::<Result<_>>()?;
    let values: Vec<f64> = lines
        .map(|l| l.trim().parse().map_err(|_| bad(format!("bad value {l:?}"))))
        .collect::<Result<_>>()?;
    if shape.iter().product::<usize>() != values.len() {
        return Err(bad(format!("{} values for shape {shape:?}", values.len())));
    }
    Ok((shape, values))
}

/// Binary PPM (`P6`) writer for an RGB image with components in `[0, 1]`.
fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        for c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Nearest-neighbour lookup of an attention grid at a fine position.
fn grid_at(values: &[f64], grid: &[usize], fine: &[usize], pos: &[usize]) -> f64 {
    let mut idx = 0;
    for ax in 0..grid.len() {
        let g = (pos[ax] * grid[ax] / fine[ax]).min(grid[ax] - 1);
        idx = idx * grid[ax] + g;
    }
    values[idx]
}

/// Blend a grey or colour base pixel with a red heat overlay.
fn overlay(base: [f64; 3], heat: f64) -> [f64; 3] {
    [0.5 * base[0] + 0.5 * heat, 0.5 * base[1], 0.5 * base[2] + 0.5 * (1.0 - heat) * 0.3]
}

/// For each pair index, write `pair<i>_visual.ppm` (frames left to right;
/// guidance row above prediction row), `pair<i>_audio.ppm` (guidance and
/// prediction side by side, time downwards), and the four raw grids
/// `pair<i>_{s_v,s_hat_v,s_a,s_hat_a}.txt`.
pub fn export_attention(model: &mut CmacModel, ds: &Dataset, indices: &[usize], out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    let cfg = model.config().clone();
    let crop = cfg.visual.input[1];
    let (b, _) = eval_batch(ds, indices, crop)?;
    let att = model.attention(&b, Mode::Eval)?;
    let vgrid = att.s_v.grid().to_vec();
    let agrid = att.s_a.grid().to_vec();
    let (vn, an) = (vgrid.iter().product::<usize>(), agrid.iter().product::<usize>());
    let p = &ds.params;
    let (t_n, tn, fn_) = (p.frames, p.spec_time, p.spec_freq);
    let vis = b.visual.to_vec();
    let aud = b.audio.to_vec();
    let maps = [
        ("s_v", att.s_v.values.to_vec(), &vgrid, vn),
        ("s_hat_v", att.s_hat_v.values.to_vec(), &vgrid, vn),
        ("s_a", att.s_a.values.to_vec(), &agrid, an),
        ("s_hat_a", att.s_hat_a.values.to_vec(), &agrid, an),
    ];
    let mut written = Vec::new();
    for (j, &i) in indices.iter().enumerate() {
        for (name, values, grid, n) in &maps {
            let file = format!("pair{i}_{name}.txt");
            write_grid(&out_dir.join(&file), grid, &values[j * n..(j + 1) * n])?;
            written.push(file);
        }
        // Visual: width = frames * crop, height = 2 * crop.
        let (w, h) = (t_n * crop, 2 * crop);
        let mut img = vec![[0.0; 3]; w * h];
        let plane = crop * crop;
        let clip = &vis[j * 3 * t_n * plane..(j + 1) * 3 * t_n * plane];
        for (row, (_, values, grid, n)) in maps[..2].iter().enumerate() {
            let sample = &values[j * n..(j + 1) * n];
            for t in 0..t_n {
                for y in 0..crop {
                    for x in 0..crop {
                        let base: [f64; 3] = std::array::from_fn(|c| clip[(c * t_n + t) * plane + y * crop + x]);
                        let heat = grid_at(sample, grid, &[t_n, crop, crop], &[t, y, x]);
                        img[(row * crop + y) * w + t * crop + x] = overlay(base, heat);
                    }
                }
            }
        }
        let file = format!("pair{i}_visual.ppm");
        write_ppm(&out_dir.join(&file), w, h, &img)?;
        written.push(file);

        // Audio: width = 2 * F (guidance | prediction), height = T~.
        let spec = &aud[j * tn * fn_..(j + 1) * tn * fn_];
        let mut img = vec![[0.0; 3]; 2 * fn_ * tn];
        for (col, (_, values, grid, n)) in maps[2..].iter().enumerate() {
            let sample = &values[j * n..(j + 1) * n];
            for t in 0..tn {
                for f in 0..fn_ {
                    let v = spec[t * fn_ + f];
                    let heat = grid_at(sample, grid, &[tn, fn_], &[t, f]);
                    img[t * 2 * fn_ + col * fn_ + f] = overlay([v; 3], heat);
                }
            }
        }
        let file = format!("pair{i}_audio.ppm");
        write_ppm(&out_dir.join(&file), 2 * fn_, tn, &img)?;
        written.push(file);
    }
    Ok(written)
}
