//! Synthetic audio-visual pairs with planted correspondence and ground-truth
//! localization, the augmentations applied to them, batching, and shard
//! files.
//!
//! Each pair shows one textured blob drifting over a noisy background; the
//! blob's texture (orientation and spatial frequency) and the centre of a
//! tone band in the spectrogram are both fixed by a latent class, and the
//! band's loudness follows the blob's area frame by frame.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Container, Section};

const SHARD_MAGIC: &[u8; 8] = b"CMACSHD1";

/// SplitMix64 finalizer over a pair, used to derive independent per-index
/// seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Spectrogram time steps.
    pub spec_time: usize,
    /// Spectrogram frequency bins.
    pub spec_freq: usize,
    pub classes: usize,
    /// Mean blob radius in pixels.
    pub blob_radius: f64,
    /// Relative amplitude of the radius oscillation.
    pub radius_swing: f64,
    /// Loudness of the tone band; 0 gives a silent object.
    pub amplitude: f64,
    pub visual_noise: f64,
    pub audio_noise: f64,
    /// Band width in frequency bins.
    pub band_width: usize,
    /// Untextured background bumps per clip.
    pub distractors: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            frames: 8,
            height: 36,
            width: 36,
            spec_time: 64,
            spec_freq: 32,
            classes: 8,
            blob_radius: 6.0,
            radius_swing: 0.4,
            amplitude: 1.0,
            visual_noise: 0.3,
            audio_noise: 0.3,
            band_width: 3,
            distractors: 2,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if [self.frames, self.height, self.width, self.spec_time, self.spec_freq, self.classes]
            .contains(&0)
        {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if self.band_width == 0 || self.spec_freq / self.classes < self.band_width {
            return Err(Error::Config(format!(
                "{} classes of {}-bin bands do not fit {} frequency bins",
                self.classes, self.band_width, self.spec_freq
            )));
        }
        let r_max = self.max_radius();
        if !(self.blob_radius > 0.0) || 2.0 * r_max + 2.0 >= self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "blob radius {} (max {r_max}) does not fit a {}x{} frame",
                self.blob_radius, self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.radius_swing) || !(self.amplitude >= 0.0) {
            return Err(Error::Config("radius swing must be in [0, 1) and amplitude non-negative".into()));
        }
        Ok(())
    }

    fn max_radius(&self) -> f64 {
        self.blob_radius * 1.15 * (1.0 + self.radius_swing)
    }

    /// `[lo, hi)` frequency rows of class `c`'s tone band.
    pub fn band_of(&self, class_id: usize) -> (usize, usize) {
        let spacing = self.spec_freq / self.classes;
        let lo = spacing * class_id + (spacing - self.band_width) / 2;
        (lo, lo + self.band_width)
    }

    pub fn clip_len(&self) -> usize {
        3 * self.frames * self.height * self.width
    }

    pub fn spec_len(&self) -> usize {
        self.spec_time * self.spec_freq
    }

    pub fn mask_len(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// One generated instance. Layouts are row-major: `clip [3, T, H, W]`,
/// `spec [T~, F]`, `region [T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub clip: Vec<f64>,
    pub spec: Vec<f64>,
    pub region: Vec<bool>,
    /// `[lo, hi)` frequency rows of the tone band.
    pub band: (usize, usize),
    pub class_id: usize,
    pub seed: u64,
    /// Blob area in pixels per frame.
    pub areas: Vec<f64>,
}

/// Generate one pair; the class is drawn from the seed.
pub fn generate_pair(seed: u64, params: &SyntheticParams) -> Result<SyntheticPair> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = rng.random_range(0..params.classes);
    generate_with_class(&mut rng, seed, class_id, params)
}

fn generate_with_class(
    rng: &mut ChaCha8Rng,
    seed: u64,
    class_id: usize,
    p: &SyntheticParams,
) -> Result<SyntheticPair> {
    let (t_n, h_n, w_n) = (p.frames, p.height, p.width);
    let plane = h_n * w_n;

    // Instance nuisances: background colour, blob tint, texture phase.
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let phase = rng.random_range(0.0..2.0 * PI);
    let theta = PI * (class_id % 4) as f64 / 4.0;
    let freq = 0.16 * (1 + class_id / 4) as f64;
    let (ct, st) = (theta.cos(), theta.sin());

    // Smooth trajectory with reflections, and an oscillating radius.
    let r0 = p.blob_radius * rng.random_range(0.85..1.15);
    let cycles = rng.random_range(0.6..1.4);
    let r_phase = rng.random_range(0.0..2.0 * PI);
    let margin = p.max_radius() + 1.0;
    let (lo_y, hi_y) = (margin, h_n as f64 - margin);
    let (lo_x, hi_x) = (margin, w_n as f64 - margin);
    let mut cy = rng.random_range(lo_y..hi_y);
    let mut cx = rng.random_range(lo_x..hi_x);
    let heading = rng.random_range(0.0..2.0 * PI);
    let speed = rng.random_range(0.5..1.5);
    let (mut vy, mut vx) = (speed * heading.sin(), speed * heading.cos());

    let distractors: Vec<(f64, f64, f64, [f64; 3])> = (0..p.distractors)
        .map(|_| {
            (
                rng.random_range(0.0..h_n as f64),
                rng.random_range(0.0..w_n as f64),
                rng.random_range(2.0..4.0),
                std::array::from_fn(|_| rng.random_range(-0.3..0.3)),
            )
        })
        .collect();

    let mut clip = vec![0.0; p.clip_len()];
    let mut region = vec![false; p.mask_len()];
    let mut areas = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let r = r0 * (1.0 + p.radius_swing * (2.0 * PI * cycles * t as f64 / t_n as f64 + r_phase).sin());
        let mut area = 0.0;
        for y in 0..h_n {
            for x in 0..w_n {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r;
                let tex = 0.5 + 0.5 * (2.0 * PI * freq * (fx * ct + fy * st) + phase).sin();
                for ch in 0..3 {
                    let noise = p.visual_noise * (rng.random::<f64>() - 0.5);
                    let v = if inside {
                        tint[ch] * tex
                    } else {
                        let bump: f64 = distractors
                            .iter()
                            .map(|(dy, dx, s, col)| col[ch] * (-((fy - dy).powi(2) + (fx - dx).powi(2)) / (2.0 * s * s)).exp())
                            .sum();
                        bg[ch] + bump
                    };
                    clip[(ch * t_n + t) * plane + y * w_n + x] = (v + noise).clamp(0.0, 1.0);
                }
                if inside {
                    region[t * plane + y * w_n + x] = true;
                    area += 1.0;
                }
            }
        }
        areas.push(area);
        cy += vy;
        cx += vx;
        if cy < lo_y || cy > hi_y {
            vy = -vy;
            cy = cy.clamp(lo_y, hi_y);
        }
        if cx < lo_x || cx > hi_x {
            vx = -vx;
            cx = cx.clamp(lo_x, hi_x);
        }
    }

    let band = p.band_of(class_id);
    let max_area = PI * (p.max_radius()).powi(2);
    let floor: Vec<f64> = (0..p.spec_freq).map(|_| rng.random_range(0.0..0.15)).collect();
    let mut spec = vec![0.0; p.spec_len()];
    for tt in 0..p.spec_time {
        let u = ((tt as f64 + 0.5) * t_n as f64 / p.spec_time as f64 - 0.5).clamp(0.0, (t_n - 1) as f64);
        let (i0, frac) = (u.floor() as usize, u.fract());
        let i1 = (i0 + 1).min(t_n - 1);
        let env = ((1.0 - frac) * areas[i0] + frac * areas[i1]) / max_area;
        for f in 0..p.spec_freq {
            let mut v = floor[f] + p.audio_noise * rng.random::<f64>();
            if (band.0..band.1).contains(&f) {
                v += p.amplitude * env;
            }
            spec[tt * p.spec_freq + f] = v.clamp(0.0, 1.0);
        }
    }

    Ok(SyntheticPair {
        clip,
        spec,
        region,
        band,
        class_id,
        seed,
        areas,
    })
}

/// Pearson correlation between per-frame in-band spectrogram energy and
/// blob area.
pub fn envelope_correlation(pair: &SyntheticPair, params: &SyntheticParams) -> f64 {
    let t_n = params.frames;
    let per = params.spec_time as f64 / t_n as f64;
    let energy: Vec<f64> = (0..t_n)
        .map(|t| {
            let (a, b) = ((t as f64 * per) as usize, ((t + 1) as f64 * per) as usize);
            let mut acc = 0.0;
            for tt in a..b {
                for f in pair.band.0..pair.band.1 {
                    acc += pair.spec[tt * params.spec_freq + f];
                }
            }
            acc
        })
        .collect();
    pearson(&energy, &pair.areas)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Mean spectrogram energy per frequency row.
pub fn band_energy_profile(pair: &SyntheticPair, params: &SyntheticParams) -> Vec<f64> {
    let mut prof = vec![0.0; params.spec_freq];
    for row in pair.spec.chunks(params.spec_freq) {
        for (p, v) in prof.iter_mut().zip(row) {
            *p += v / params.spec_time as f64;
        }
    }
    prof
}

/// Accuracy on `test` of a nearest-centroid classifier fit on `train`,
/// using per-row spectrogram energy as the feature.
pub fn nearest_centroid_accuracy(train: &[SyntheticPair], test: &[SyntheticPair], params: &SyntheticParams) -> f64 {
    let f = params.spec_freq;
    let mut centroids = vec![vec![0.0; f]; params.classes];
    let mut counts = vec![0usize; params.classes];
    for p in train {
        for (c, v) in centroids[p.class_id].iter_mut().zip(band_energy_profile(p, params)) {
            *c += v;
        }
        counts[p.class_id] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|p| {
            let prof = band_energy_profile(p, params);
            let best = (0..params.classes)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&prof).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(&prof).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                });
            best == Some(p.class_id)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

/// Augmentation strengths. Widths are in pixels / spectrogram cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Square crop side.
    pub crop: usize,
    /// Random crop offsets; otherwise the crop is centred.
    pub random_crop: bool,
    pub flip_prob: f64,
    /// Per-channel multiplicative jitter range `1 +- color_jitter`.
    pub color_jitter: f64,
    /// Maximum displacement of the time-warp anchor, in spectrogram steps.
    pub time_warp: usize,
    pub freq_mask: usize,
    pub time_mask: usize,
}

impl AugmentConfig {
    /// Training-time defaults for 36x36 frames and 64x32 spectrograms.
    pub fn desk_train() -> Self {
        AugmentConfig {
            crop: 32,
            random_crop: true,
            flip_prob: 0.5,
            color_jitter: 0.1,
            time_warp: 4,
            freq_mask: 3,
            time_mask: 6,
        }
    }

    /// Deterministic centre crop, no other perturbation.
    pub fn eval(crop: usize) -> Self {
        AugmentConfig {
            crop,
            random_crop: false,
            flip_prob: 0.0,
            color_jitter: 0.0,
            time_warp: 0,
            freq_mask: 0,
            time_mask: 0,
        }
    }

    pub fn validate(&self, params: &SyntheticParams) -> Result<()> {
        if self.crop == 0 || self.crop > params.height.min(params.width) {
            return Err(Error::Config(format!(
                "crop {} larger than {}x{} frame",
                self.crop, params.height, params.width
            )));
        }
        if self.freq_mask >= params.spec_freq || self.time_mask >= params.spec_time {
            return Err(Error::Config("mask widths must be smaller than the masked axis".into()));
        }
        if self.time_warp > 0 && params.spec_time < 2 * self.time_warp + 3 {
            return Err(Error::Config(format!("time warp {} too large for {} steps", self.time_warp, params.spec_time)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::Config("flip probability must be in [0, 1] and jitter in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A cropped/flipped clip together with its identically transformed mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedClip {
    /// `[3, T, crop, crop]`.
    pub clip: Vec<f64>,
    /// `[T, crop, crop]`.
    pub region: Vec<bool>,
    /// Top-left corner `(y, x)` of the crop window.
    pub origin: (usize, usize),
    pub flipped: bool,
}

/// Crop + flip a `[C, T, H, W]` array of any element type.
fn crop_flip<T: Copy>(src: &[T], planes: usize, h: usize, w: usize, crop: usize, origin: (usize, usize), flip: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * crop * crop);
    for pl in 0..planes {
        let base = pl * h * w;
        for y in 0..crop {
            for x in 0..crop {
                let sx = if flip { crop - 1 - x } else { x };
                out.push(src[base + (origin.0 + y) * w + origin.1 + sx]);
            }
        }
    }
    out
}

/// Horizontal mirror of square `[planes, s, s]` data.
pub fn flip_horizontal<T: Copy>(src: &[T], planes: usize, side: usize) -> Vec<T> {
    crop_flip(src, planes, side, side, side, (0, 0), true)
}

pub fn augment_visual(
    clip: &[f64],
    region: &[bool],
    params: &SyntheticParams,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<AugmentedClip> {
    let (t, h, w) = (params.frames, params.height, params.width);
    if cfg.crop > h || cfg.crop > w {
        return Err(Error::Config(format!("crop {} larger than {h}x{w} frame", cfg.crop)));
    }
    if clip.len() != 3 * t * h * w || region.len() != t * h * w {
        return Err(Error::dim("augment_visual", format!("clip/mask sizes {} / {}", clip.len(), region.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = if cfg.random_crop {
        (rng.random_range(0..=h - cfg.crop), rng.random_range(0..=w - cfg.crop))
    } else {
        ((h - cfg.crop) / 2, (w - cfg.crop) / 2)
    };
    let flipped = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
    let mut out = crop_flip(clip, 3 * t, h, w, cfg.crop, origin, flipped);
    if cfg.color_jitter > 0.0 {
        let per = t * cfg.crop * cfg.crop;
        for ch in 0..3 {
            let gain = 1.0 + rng.random_range(-cfg.color_jitter..cfg.color_jitter);
            for v in &mut out[ch * per..(ch + 1) * per] {
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        }
    }
    Ok(AugmentedClip {
        clip: out,
        region: crop_flip(region, t, h, w, cfg.crop, origin, flipped),
        origin,
        flipped,
    })
}

/// Time warp, then frequency and time masks filled with the spectrogram
/// mean. `spec` is `[T~, F]`.
pub fn augment_audio(spec: &[f64], params: &SyntheticParams, cfg: &AugmentConfig, seed: u64) -> Result<Vec<f64>> {
    let (tn, fn_) = (params.spec_time, params.spec_freq);
    if spec.len() != tn * fn_ {
        return Err(Error::dim("augment_audio", format!("{} values for a {tn}x{fn_} spectrogram", spec.len())));
    }
    if cfg.freq_mask >= fn_ || cfg.time_mask >= tn {
        return Err(Error::Config(format!(
            "mask widths {}/{} must be below axis lengths {fn_}/{tn}",
            cfg.freq_mask, cfg.time_mask
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if cfg.time_warp > 0 {
        let w = cfg.time_warp;
        if tn < 2 * w + 3 {
            return Err(Error::Config(format!("time warp {w} too large for {tn} steps")));
        }
        let anchor = rng.random_range(w + 1..=tn - 2 - w) as f64;
        let shift = rng.random_range(-(w as i64)..=w as i64) as f64;
        time_warp(spec, tn, fn_, anchor, anchor + shift)
    } else {
        spec.to_vec()
    };
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    if cfg.freq_mask > 0 {
        let f0 = rng.random_range(0..=fn_ - cfg.freq_mask);
        for row in out.chunks_mut(fn_) {
            row[f0..f0 + cfg.freq_mask].fill(mean);
        }
    }
    if cfg.time_mask > 0 {
        let t0 = rng.random_range(0..=tn - cfg.time_mask);
        out[t0 * fn_..(t0 + cfg.time_mask) * fn_].fill(mean);
    }
    Ok(out)
}

/// Piecewise-linear time remap sending source time `anchor` to `target`
/// with both ends fixed; output sampled by linear interpolation.
pub fn time_warp(spec: &[f64], tn: usize, fn_: usize, anchor: f64, target: f64) -> Vec<f64> {
    let last = (tn - 1) as f64;
    let mut out = vec![0.0; spec.len()];
    for t in 0..tn {
        let tf = t as f64;
        let src = if tf <= target {
            tf * anchor / target
        } else {
            anchor + (tf - target) * (last - anchor) / (last - target)
        };
        let src = src.clamp(0.0, last);
        let (i0, frac) = (src.floor() as usize, src - src.floor());
        let i1 = (i0 + 1).min(tn - 1);
        for f in 0..fn_ {
            out[t * fn_ + f] = (1.0 - frac) * spec[i0 * fn_ + f] + frac * spec[i1 * fn_ + f];
        }
    }
    out
}

/// Uniformly random cyclic permutation (Sattolo), so no index maps to itself.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Contract(format!("cannot mismatch a batch of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// Generated pairs plus the audio each clip is shown with.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub pairs: Vec<SyntheticPair>,
    /// Clip `i` is paired with the spectrogram of `pairs[audio_index[i]]`.
    pub audio_index: Vec<usize>,
}

/// `sync` pairs every clip with its own audio; otherwise audio is drawn
/// from a different instance (diagnostic negatives).
pub fn make_batch(n: usize, sync: bool, seeds: &[u64], params: &SyntheticParams) -> Result<PairBatch> {
    if n == 0 || seeds.len() != n {
        return Err(Error::Contract(format!("make_batch needs n >= 1 seeds, got n={n}, {} seeds", seeds.len())));
    }
    let audio_index = if sync {
        (0..n).collect()
    } else {
        derangement(n, seeds.iter().fold(0, |acc, &s| derive_seed(acc, s)))?
    };
    let pairs = seeds.iter().map(|&s| generate_pair(s, params)).collect::<Result<_>>()?;
    Ok(PairBatch { pairs, audio_index })
}

/// A fixed collection of pairs generated from per-index derived seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: SyntheticParams,
    pub base_seed: u64,
    pub pairs: Vec<SyntheticPair>,
}

#[derive(Serialize, Deserialize)]
struct ShardManifest {
    format: String,
    params: SyntheticParams,
    base_seed: u64,
    count: usize,
    clip_shape: [usize; 4],
    spec_shape: [usize; 2],
    region_shape: [usize; 3],
    seeds: Vec<u64>,
    class_ids: Vec<usize>,
    bands: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn generate(params: &SyntheticParams, count: usize, base_seed: u64) -> Result<Self> {
        params.validate()?;
        let pairs = (0..count as u64)
            .map(|i| generate_pair(derive_seed(base_seed, i), params))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            params: params.clone(),
            base_seed,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.class_id).collect()
    }

    fn to_container(&self) -> Container {
        let p = &self.params;
        let manifest = ShardManifest {
            format: "cmac-shard-v1".into(),
            params: p.clone(),
            base_seed: self.base_seed,
            count: self.pairs.len(),
            clip_shape: [3, p.frames, p.height, p.width],
            spec_shape: [p.spec_time, p.spec_freq],
            region_shape: [p.frames, p.height, p.width],
            seeds: self.pairs.iter().map(|x| x.seed).collect(),
            class_ids: self.class_ids(),
            bands: self.pairs.iter().map(|x| x.band).collect(),
        };
        let mut c = Container::new(serde_json::to_vec(&manifest).expect("manifest serializes"));
        let clips: Vec<f64> = self.pairs.iter().flat_map(|x| x.clip.iter().copied()).collect();
        let specs: Vec<f64> = self.pairs.iter().flat_map(|x| x.spec.iter().copied()).collect();
        let areas: Vec<f64> = self.pairs.iter().flat_map(|x| x.areas.iter().copied()).collect();
        let regions: Vec<u8> = self.pairs.iter().flat_map(|x| x.region.iter().map(|&b| b as u8)).collect();
        c.push_f64("clips", &clips);
        c.push_f64("specs", &specs);
        c.push_f64("areas", &areas);
        c.push_u8("regions", &regions);
        c
    }

    /// Serialized shard bytes (see [`crate::io`] for the container layout).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes(SHARD_MAGIC)
    }

    pub fn export_shard(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, SHARD_MAGIC)
    }

    pub fn import_shard(path: &Path) -> Result<Self> {
        let c = Container::read(path, "shard", SHARD_MAGIC)?;
        let bad = |detail: String| Error::format("shard", path, detail);
        let m: ShardManifest = serde_json::from_slice(&c.manifest).map_err(|e| bad(e.to_string()))?;
        m.params.validate()?;
        let p = &m.params;
        let n = m.count;
        if m.seeds.len() != n || m.class_ids.len() != n || m.bands.len() != n {
            return Err(bad("per-pair manifest lists disagree with count".into()));
        }
        let f64s = |name: &str, per: usize| -> Result<Vec<f64>> {
            match c.section(name) {
                Some(Section::F64(v)) if v.len() == per * n => Ok(v.clone()),
                _ => Err(bad(format!("section {name:?} missing or mis-sized"))),
            }
        };
        let clips = f64s("clips", p.clip_len())?;
        let specs = f64s("specs", p.spec_len())?;
        let areas = f64s("areas", p.frames)?;
        let regions = match c.section("regions") {
            Some(Section::U8(v)) if v.len() == p.mask_len() * n => v,
            _ => return Err(bad("section \"regions\" missing or mis-sized".into())),
        };
        let pairs = (0..n)
            .map(|i| SyntheticPair {
                clip: clips[i * p.clip_len()..(i + 1) * p.clip_len()].to_vec(),
                spec: specs[i * p.spec_len()..(i + 1) * p.spec_len()].to_vec(),
                region: regions[i * p.mask_len()..(i + 1) * p.mask_len()].iter().map(|&b| b != 0).collect(),
                band: m.bands[i],
                class_id: m.class_ids[i],
                seed: m.seeds[i],
                areas: areas[i * p.frames..(i + 1) * p.frames].to_vec(),
            })
            .collect();
        Ok(Dataset {
            params: m.params,
            base_seed: m.base_seed,
            pairs,
        })
    }
}

/// Pool a boolean `[spatial...]` pixel mask onto an encoder grid: a cell is
/// in the region when at least a quarter of its pixels are, and in every
/// grid time slice the best-covered cell is always included (so the
/// region is never empty while the pixel mask is not).
pub fn grid_mask(mask: &[bool], dims: &[usize], grid: &[usize]) -> Result<Vec<bool>> {
    if dims.len() != grid.len() || dims.iter().product::<usize>() != mask.len() {
        return Err(Error::dim("grid_mask", format!("mask {} for dims {dims:?} / grid {grid:?}", mask.len())));
    }
    if dims.iter().zip(grid).any(|(d, g)| *g == 0 || d % g != 0) {
        return Err(Error::dim("grid_mask", format!("grid {grid:?} does not tile {dims:?}")));
    }
    let cell: Vec<usize> = dims.iter().zip(grid).map(|(d, g)| d / g).collect();
    let gn: usize = grid.iter().product();
    let mut cover = vec![0usize; gn];
    let rank = dims.len();
    for (flat, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (mut rem, mut gidx, mut gstride) = (flat, 0, 1);
        let mut coords = vec![0; rank];
        for ax in (0..rank).rev() {
            coords[ax] = rem % dims[ax];
            rem /= dims[ax];
        }
        for ax in (0..rank).rev() {
            gidx += coords[ax] / cell[ax] * gstride;
            gstride *= grid[ax];
        }
        cover[gidx] += 1;
    }
    let cell_size: usize = cell.iter().product();
    let mut out: Vec<bool> = cover.iter().map(|&c| 4 * c >= cell_size && c > 0).collect();
    let slice = gn / grid[0];
    for s in 0..grid[0] {
        let range = s * slice..(s + 1) * slice;
        let (best, &count) = cover[range.clone()]
            .iter()
            .enumerate()
            .max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i)))
            .expect("non-empty slice");
        if count > 0 {
            out[range.start + best] = true;
        }
    }
    Ok(out)
}

/// Band mask over the frequency axis of an audio grid `[T', F']`.
pub fn band_grid_mask(band: (usize, usize), spec_freq: usize, grid: &[usize]) -> Result<Vec<bool>> {
    if grid.len() != 2 || grid[1] == 0 || spec_freq % grid[1] != 0 {
        return Err(Error::dim("band_grid_mask", format!("grid {grid:?} for {spec_freq} bins")));
    }
    let per = spec_freq / grid[1];
    let row: Vec<bool> = (0..grid[1])
        .map(|j| {
            let (lo, hi) = (j * per, (j + 1) * per);
            band.0 < hi && band.1 > lo
        })
        .collect();
    Ok(std::iter::repeat_n(row, grid[0]).flatten().collect())
}
