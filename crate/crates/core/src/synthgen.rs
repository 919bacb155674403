//! Parametric synthetic sarcomere-like cells and patches.
//!
//! Five organization levels, each with its own texture:
//! 1. diffuse haze with sparse puncta
//! 2. dense puncta
//! 3. puncta mixed with short fibers
//! 4. periodic stripes in domains of differing orientation, with residual puncta
//! 5. globally aligned periodic stripes
//!
//! Inside the cell, intensity is `mean(level) · (h·haze + (1−h)·structure)`
//! where `h` falls with level and both fields are normalized to mean 1.
//! Fractional levels blend the two neighbouring integer textures.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_image_png16, write_manifest, CellImage, ManifestRecord};
use crate::error::{Error, Result};
use crate::patchnet::{PatchExample, PATCH_SIZE};

pub const LEVELS: usize = 5;
pub const DEFAULT_CELL_SIZE: usize = 128;
pub const DEFAULT_STRIPE_PERIOD: f64 = 7.0;

/// Mean in-cell intensity per level.
const LEVEL_MEAN: [f64; LEVELS] = [0.08, 0.15, 0.22, 0.29, 0.36];
/// Share of the diffuse haze per level.
const HAZE_FRACTION: [f64; LEVELS] = [0.85, 0.6, 0.45, 0.3, 0.15];
/// Orientation coherence per level.
const ALIGNMENT: [f64; LEVELS] = [0.0, 0.0, 0.1, 0.25, 1.0];
/// Puncta per 1000 px².
const PUNCTA_DENSITY: [f64; LEVELS] = [3.0, 14.0, 7.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub level: f64,
    pub size: usize,
    pub stripe_period: f64,
    /// Orientation coherence, 0 (random) to 1 (single orientation).
    pub alignment: f64,
    pub puncta_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Spec for `level` with the level-derived texture parameters.
    pub fn for_level(level: f64, size: usize, seed: u64) -> Self {
        SynthSpec {
            level,
            size,
            stripe_period: DEFAULT_STRIPE_PERIOD,
            alignment: interp(&ALIGNMENT, level),
            puncta_density: interp(&PUNCTA_DENSITY, level),
            noise_sigma: 0.005,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..=5.0).contains(&self.level) {
            return Err(Error::Config(format!("level {} outside 1..=5", self.level)));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        if !(self.stripe_period >= 2.0) {
            return Err(Error::Config(format!("stripe period {} below 2 px", self.stripe_period)));
        }
        if !(0.0..=1.0).contains(&self.alignment) || self.puncta_density < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("alignment must be in [0,1]; density and noise non-negative".into()));
        }
        Ok(())
    }
}

fn interp(table: &[f64; LEVELS], level: f64) -> f64 {
    let x = (level.clamp(1.0, 5.0) - 1.0).min(LEVELS as f64 - 1.0);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(LEVELS - 1);
    let t = x - lo as f64;
    table[lo] * (1.0 - t) + table[hi] * t
}

/// Sum of isotropic Gaussian spots at Poisson-distributed positions.
fn puncta(size: usize, density: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((size, size));
    let expected = density * (size * size) as f64 / 1000.0;
    if expected <= 0.0 {
        return out;
    }
    let count = Poisson::new(expected).map(|p| p.sample(rng) as usize).unwrap_or(0);
    let reach = (3.0 * sigma).ceil() as isize;
    for _ in 0..count {
        let (cy, cx) = (rng.random::<f64>() * size as f64, rng.random::<f64>() * size as f64);
        let amp = 0.6 + 0.8 * rng.random::<f64>();
        let (iy, ix) = (cy as isize, cx as isize);
        for y in (iy - reach).max(0)..(iy + reach + 1).min(size as isize) {
            for x in (ix - reach).max(0)..(ix + reach + 1).min(size as isize) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out[(y as usize, x as usize)] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}

/// Short blurred line segments with random orientations.
fn fibers(size: usize, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((size, size));
    for _ in 0..count {
        let (cy, cx) = (rng.random::<f64>() * size as f64, rng.random::<f64>() * size as f64);
        let theta = rng.random::<f64>() * PI;
        let half = 5.0 + 5.0 * rng.random::<f64>();
        let (dy, dx) = (theta.sin(), theta.cos());
        let reach = (half + 3.0).ceil() as isize;
        for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(size as isize) {
            for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(size as isize) {
                let (py, px) = (y as f64 - cy, x as f64 - cx);
                let along = (py * dy + px * dx).clamp(-half, half);
                let d2 = (py - along * dy).powi(2) + (px - along * dx).powi(2);
                out[(y as usize, x as usize)] += (-d2 / 2.0).exp();
            }
        }
    }
    out
}

/// Sharpened cosine stripes. `orientation(y, x)` gives the stripe normal
/// angle at each pixel; `phase` offsets the pattern.
fn stripes(size: usize, period: f64, phase: f64, orientation: impl Fn(usize, usize) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        let theta = orientation(y, x);
        let u = y as f64 * theta.sin() + x as f64 * theta.cos();
        (0.5 * (1.0 + (2.0 * PI * u / period + phase).cos())).powi(2)
    })
}

/// Stripes whose orientation is piecewise constant over Voronoi domains.
/// `alignment` pulls every domain orientation toward a shared angle.
fn domain_stripes(size: usize, period: f64, alignment: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let base = rng.random::<f64>() * PI;
    let domains: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let spread = (1.0 - alignment) * (rng.random::<f64>() - 0.5) * PI;
            (rng.random::<f64>() * size as f64, rng.random::<f64>() * size as f64, base + spread)
        })
        .collect();
    let phase = rng.random::<f64>() * 2.0 * PI;
    stripes(size, period, phase, |y, x| {
        domains
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - y as f64).powi(2) + (a.1 - x as f64).powi(2);
                let db = (b.0 - y as f64).powi(2) + (b.1 - x as f64).powi(2);
                da.total_cmp(&db)
            })
            .map(|d| d.2)
            .unwrap_or(base)
    })
}

/// Smooth low-frequency field with mean near 1.
fn haze(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI))
        .collect();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
        1.0 + waves.iter().map(|(a, b, p)| 0.05 * (a.cos() * fy * 2.0 * PI + b.cos() * fx * 2.0 * PI + p).sin()).sum::<f64>()
    })
}

/// Structure field of an integer level, normalized to mean 1 over `region`.
fn structure(level: usize, spec: &SynthSpec, region: &Array2<bool>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = spec.size;
    let field = match level {
        1 => puncta(n, spec.puncta_density.max(PUNCTA_DENSITY[0]), 2.0, rng),
        2 => puncta(n, spec.puncta_density.max(PUNCTA_DENSITY[1]), 1.5, rng),
        3 => {
            let mut f = puncta(n, spec.puncta_density.max(PUNCTA_DENSITY[2]), 1.5, rng);
            let count = ((n * n) as f64 / 400.0).round() as usize;
            f += &fibers(n, count, rng);
            f
        }
        4 => {
            let stripes = normalize_mean(domain_stripes(n, spec.stripe_period, spec.alignment.min(0.8), rng), region);
            let dots = normalize_mean(puncta(n, PUNCTA_DENSITY[2], 1.5, rng), region);
            stripes * 0.6 + dots * 0.4
        }
        _ => {
            let base = rng.random::<f64>() * PI;
            let phase = rng.random::<f64>() * 2.0 * PI;
            stripes(n, spec.stripe_period, phase, |_, _| base)
        }
    };
    normalize_mean(field, region)
}

fn normalize_mean(mut field: Array2<f64>, region: &Array2<bool>) -> Array2<f64> {
    let (sum, count) = field
        .iter()
        .zip(region)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    if mean > 0.0 {
        field.mapv_inplace(|v| v / mean);
    } else {
        field.fill(1.0);
    }
    field
}

/// In-cell texture (before masking and noise) with mean `mean(level)` over `region`.
fn texture(spec: &SynthSpec, region: &Array2<bool>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let x = spec.level.clamp(1.0, 5.0) - 1.0;
    let lo = x.floor() as usize;
    let t = x - lo as f64;
    let mut s = structure(lo + 1, spec, region, rng);
    if t > 0.0 && lo + 1 < LEVELS {
        let hi = structure(lo + 2, spec, region, rng);
        s = s * (1.0 - t) + hi * t;
    }
    let h = interp(&HAZE_FRACTION, spec.level);
    let hz = normalize_mean(haze(spec.size, rng), region);
    (hz * h + s * (1.0 - h)) * interp(&LEVEL_MEAN, spec.level)
}

/// Random ellipse covering most of the frame.
pub fn cell_mask(size: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let c = size as f64 / 2.0;
    let (cy, cx) = (c + (rng.random::<f64>() - 0.5) * 0.1 * size as f64, c + (rng.random::<f64>() - 0.5) * 0.1 * size as f64);
    let a = (0.40 + 0.08 * rng.random::<f64>()) * size as f64;
    let b = (0.30 + 0.08 * rng.random::<f64>()) * size as f64;
    let phi = rng.random::<f64>() * PI;
    let (sp, cp) = phi.sin_cos();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let u = dx * cp + dy * sp;
        let v = -dx * sp + dy * cp;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

fn add_noise(pixels: &mut Array2<f64>, region: &Array2<bool>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for (v, &m) in pixels.iter_mut().zip(region) {
        if m {
            *v = (*v + normal.sample(rng)).max(0.0);
        }
    }
}

/// A generated cell with its mask and level.
#[derive(Debug, Clone)]
pub struct SyntheticCell {
    pub image: CellImage,
    pub mask: Array2<bool>,
    pub level: f64,
}

/// Generates one cell; pixels outside the elliptical mask are exactly 0 and
/// all values lie in `[0, 1]`.
pub fn generate_cell(spec: &SynthSpec, id: &str) -> Result<SyntheticCell> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mask = cell_mask(spec.size, &mut rng);
    let mut pixels = texture(spec, &mask, &mut rng);
    add_noise(&mut pixels, &mask, spec.noise_sigma, &mut rng);
    for (v, &m) in pixels.iter_mut().zip(&mask) {
        *v = if m { v.clamp(0.0, 1.0) } else { 0.0 };
    }
    Ok(SyntheticCell { image: CellImage::new(id, pixels)?, mask, level: spec.level })
}

/// How levels are assigned across a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelDistribution {
    /// Exactly `n / 5` per level (remainder to the lowest levels), shuffled.
    Balanced,
    /// Independent draws with these relative weights for levels 1..=5.
    Weights([f64; LEVELS]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub n: usize,
    pub levels: LevelDistribution,
    pub size: usize,
    pub seed: u64,
    /// Probability that the second expert differs from the level by ±0.5.
    pub expert_noise: f64,
    /// Probability that the second expert differs by ±1.5, which excludes the cell.
    pub disagreement: f64,
    pub noise_sigma: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n: 100,
            levels: LevelDistribution::Balanced,
            size: DEFAULT_CELL_SIZE,
            seed: 1,
            expert_noise: 0.5,
            disagreement: 0.0,
            noise_sigma: 0.005,
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset size must be ≥ 1".into()));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.expert_noise) || !prob(self.disagreement) || self.expert_noise + self.disagreement > 1.0 {
            return Err(Error::Config("expert noise and disagreement must be probabilities summing to ≤ 1".into()));
        }
        if let LevelDistribution::Weights(w) = &self.levels {
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("level weights must be non-negative with a positive sum".into()));
            }
        }
        Ok(())
    }

    /// Level of every cell, in generation order.
    pub fn draw_levels(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        match &self.levels {
            LevelDistribution::Balanced => {
                let mut levels: Vec<u8> = (0..self.n).map(|i| (i % LEVELS) as u8 + 1).collect();
                rand::seq::SliceRandom::shuffle(levels.as_mut_slice(), rng);
                levels
            }
            LevelDistribution::Weights(w) => {
                let total: f64 = w.iter().sum();
                (0..self.n)
                    .map(|_| {
                        let mut u = rng.random::<f64>() * total;
                        for (i, &wi) in w.iter().enumerate() {
                            if u < wi {
                                return i as u8 + 1;
                            }
                            u -= wi;
                        }
                        LEVELS as u8
                    })
                    .collect()
            }
        }
    }
}

/// Second-expert score: the level, shifted by ±0.5 with probability
/// `noise` or by ±1.5 with probability `disagreement`, reflected into 1..=5.
pub fn second_expert(level: f64, noise: f64, disagreement: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u = rng.random::<f64>();
    let step = if u < disagreement {
        1.5
    } else if u < disagreement + noise {
        0.5
    } else {
        return level;
    };
    let up = rng.random::<bool>();
    let shifted = if up { level + step } else { level - step };
    if (1.0..=5.0).contains(&shifted) {
        shifted
    } else if up {
        level - step
    } else {
        level + step
    }
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest_path: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub levels: Vec<u8>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPEC_FILE: &str = "synth_spec.json";

/// Writes `images/cell_NNNNN.png`, `manifest.csv` and `synth_spec.json` under `out`.
pub fn generate_dataset(spec: &SynthDatasetSpec, out: &Path) -> Result<SynthDataset> {
    spec.validate()?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let levels = spec.draw_levels(&mut rng);
    let mut records = Vec::with_capacity(spec.n);
    for (i, &level) in levels.iter().enumerate() {
        let cell_seed: u64 = rng.random();
        let expert2 = second_expert(level as f64, spec.expert_noise, spec.disagreement, &mut rng);
        let id = format!("cell_{i:05}");
        let cell_spec = SynthSpec { noise_sigma: spec.noise_sigma, ..SynthSpec::for_level(level as f64, spec.size, cell_seed) };
        let cell = generate_cell(&cell_spec, &id)?;
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        save_image_png16(cell.image.pixels(), &out.join(&rel))?;
        records.push(ManifestRecord { image_path: rel, expert1: level as f64, expert2 });
    }
    let manifest_path = out.join(MANIFEST_FILE);
    write_manifest(&records, &manifest_path)?;
    let spec_path = out.join(SPEC_FILE);
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "dataset": spec,
        "levels": {
            "mean_intensity": LEVEL_MEAN,
            "haze_fraction": HAZE_FRACTION,
            "alignment": ALIGNMENT,
            "puncta_per_1000px": PUNCTA_DENSITY,
            "stripe_period": DEFAULT_STRIPE_PERIOD,
        }
    }))?;
    fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(SynthDataset { manifest_path, records, levels })
}

/// Balanced 96×96 texture patches, `per_class` of each class 1..=5, with
/// mean intensity equal to the class mean.
pub fn generate_patches(per_class: usize, seed: u64) -> Vec<PatchExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), true);
    let mut out = Vec::with_capacity(per_class * LEVELS);
    for _ in 0..per_class {
        for class in 1..=LEVELS {
            let spec = SynthSpec::for_level(class as f64, PATCH_SIZE, rng.random());
            let mut local = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut px = texture(&spec, &full, &mut local);
            add_noise(&mut px, &full, spec.noise_sigma, &mut local);
            let patch = px.mapv(|v| v.clamp(0.0, 1.0) as f32);
            out.push(PatchExample { patch, class_id: class as u8 });
        }
    }
    out
}

/// `pixels` rescaled so its sum equals `total`.
pub fn with_total_intensity(pixels: &Array2<f64>, total: f64) -> Array2<f64> {
    let s = pixels.sum();
    if s > 0.0 {
        pixels * (total / s)
    } else {
        pixels.clone()
    }
}
