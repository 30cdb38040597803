//! Procedural joint-like images with known generative factors.
//!
//! Each image shows two bright masses (upper and lower "bone") separated by a
//! horizontal gap whose width is the severity driver, with optional lateral
//! protrusions at the joint margins and a smooth texture inside the masses.
//! [`measure_gap`] reads the gap width back from pixels and serves as the
//! ground-truth oracle for traversals.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LcxError, Result};
use crate::imageio;
use crate::tensor::ImageTensor;

pub const DEFAULT_GAP_THRESHOLD: f64 = 0.45;
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [32, 64, 128];

/// Nominal intensities of mass interior and background.
const BONE: f64 = 0.7;
const BACKGROUND: f64 = -0.7;
/// Peak texture amplitude; peak-to-peak 0.3 of the 2.0 dynamic range.
const TEXTURE_AMPLITUDE: f64 = 0.15;
/// Darkest value a column may reach and still count as "no structure".
const DIP_MARGIN: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub gap_width: f64,
    pub bump_amplitude: f64,
    pub x_offset: f64,
    pub y_offset: f64,
    pub texture_seed: u32,
}

impl FactorVector {
    pub fn validate(&self) -> Result<()> {
        check_range("gap_width", self.gap_width, 0.0, 1.0, "[0, 1]")?;
        check_range("bump_amplitude", self.bump_amplitude, 0.0, 1.0, "[0, 1]")?;
        check_range("x_offset", self.x_offset, -0.1, 0.1, "[-0.1, 0.1]")?;
        check_range("y_offset", self.y_offset, -0.1, 0.1, "[-0.1, 0.1]")?;
        Ok(())
    }

    pub fn label(&self, gap_threshold: f64) -> u8 {
        u8::from(self.gap_width < gap_threshold)
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        FactorVector {
            gap_width: rng.random_range(0.0..=1.0),
            bump_amplitude: rng.random_range(0.0..=1.0),
            x_offset: rng.random_range(-0.1..=0.1),
            y_offset: rng.random_range(-0.1..=0.1),
            texture_seed: rng.random(),
        }
    }
}

fn check_range(field: &'static str, value: f64, lo: f64, hi: f64, expected: &'static str) -> Result<()> {
    if !(lo..=hi).contains(&value) {
        return Err(LcxError::Range {
            field,
            value,
            expected,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub label: u8,
    /// Ground truth for oracle checks; never fed to a model.
    pub factors: FactorVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub resolution: usize,
    pub gap_threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            resolution: 64,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(LcxError::Config {
                path: "resolution".into(),
                message: format!("must be one of {SUPPORTED_RESOLUTIONS:?}, got {}", self.resolution),
            });
        }
        if !(self.gap_threshold > 0.0 && self.gap_threshold < 1.0) {
            return Err(LcxError::Config {
                path: "gap_threshold".into(),
                message: format!("must lie in (0, 1), got {}", self.gap_threshold),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub generation_seed: u64,
    pub config_digest: String,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map(|s| s.image.resolution())
            .unwrap_or(0)
    }
}

pub fn label_mean(samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.label as f64).sum::<f64>() / samples.len() as f64
}

// --- texture ---------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with stream coordinates into an independent 64-bit seed.
pub(crate) fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn lattice(seed: u32, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = stream_seed(seed as u64, &[octave, ix as u64, iy as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u32, octave: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, octave, ix, iy);
    let b = lattice(seed, octave, ix + 1, iy);
    let c = lattice(seed, octave, ix, iy + 1);
    let d = lattice(seed, octave, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Two-octave smooth noise in `[-1, 1]`, lattice scaled to the image size.
fn texture(seed: u32, resolution: f64, x: f64, y: f64) -> f64 {
    let cell = resolution / 8.0;
    0.65 * value_noise(seed, 0, x / cell, y / cell) + 0.35 * value_noise(seed, 1, 2.0 * x / cell, 2.0 * y / cell)
}

// --- rendering -------------------------------------------------------------

struct Geometry {
    res: f64,
    cx: f64,
    upper: f64,
    lower: f64,
    half_width: f64,
    /// Heights of the upper and lower mass from their joint surfaces.
    /// Drawn from the texture seed, so the outer edges say nothing about the gap.
    heights: (f64, f64),
    flat_half: f64,
    curl: f64,
    bump_radius: f64,
}

/// Mass height as a fraction of the resolution, in [0.1, 0.27). With the
/// largest gap and offset the outer edge stays inside the frame.
fn mass_height(texture_seed: u32, which: u64) -> f64 {
    let u = (stream_seed(texture_seed as u64, &[0x6d61_7373, which]) >> 11) as f64 / (1u64 << 53) as f64;
    0.1 + 0.17 * u
}

impl Geometry {
    fn new(f: &FactorVector, resolution: usize) -> Self {
        let res = resolution as f64;
        let cy = res / 2.0 + f.y_offset * res;
        let gap_px = f.gap_width * res / 4.0;
        Geometry {
            res,
            cx: res / 2.0 + f.x_offset * res,
            upper: cy - gap_px / 2.0,
            lower: cy + gap_px / 2.0,
            half_width: 0.36 * res,
            heights: (mass_height(f.texture_seed, 0) * res, mass_height(f.texture_seed, 1) * res),
            flat_half: 0.25 * res,
            curl: 0.1 * res,
            bump_radius: f.bump_amplitude * res / 10.0,
        }
    }

    /// Vertical retreat of both joint surfaces away from the gap at `x`.
    fn curl_at(&self, x: f64) -> f64 {
        let t = ((x - self.cx).abs() - self.flat_half).max(0.0) / (self.half_width - self.flat_half);
        self.curl * t * t
    }

    fn bumps(&self) -> [(f64, f64); 4] {
        let (l, r) = (self.cx - self.half_width, self.cx + self.half_width);
        let (u, d) = (self.upper - self.curl, self.lower + self.curl);
        [(l, u), (r, u), (l, d), (r, d)]
    }
}

/// Renders the image for `factors`; a pure function of its inputs.
pub fn generate_sample(factors: &FactorVector, resolution: usize) -> Result<LabeledSample> {
    generate_sample_with(factors, &SynthConfig {
        resolution,
        ..SynthConfig::default()
    })
}

pub fn generate_sample_with(factors: &FactorVector, config: &SynthConfig) -> Result<LabeledSample> {
    config.validate()?;
    factors.validate()?;
    let geo = Geometry::new(factors, config.resolution);
    let n = config.resolution;
    let mut pixels = Vec::with_capacity(n * n);
    for row in 0..n {
        let yc = row as f64 + 0.5;
        for col in 0..n {
            let xc = col as f64 + 0.5;
            let curl = geo.curl_at(xc);
            let (yu, yl) = (geo.upper - curl, geo.lower + curl);
            let (top, bottom) = (geo.upper - geo.heights.0, geo.lower + geo.heights.1);
            let horiz_in = geo.half_width - (xc - geo.cx).abs();
            let hcov = (horiz_in + 0.5).clamp(0.0, 1.0);
            let span = |a: f64, b: f64| (b.min(row as f64 + 1.0) - a.max(row as f64)).clamp(0.0, 1.0);
            let vcov = (span(top, yu) + span(yl, bottom)).min(1.0);
            let mut cov = hcov * vcov;
            if geo.bump_radius > 0.0 {
                for (bx, by) in geo.bumps() {
                    let dist = ((xc - bx).powi(2) + (yc - by).powi(2)).sqrt();
                    cov = cov.max((geo.bump_radius - dist + 0.5).clamp(0.0, 1.0));
                }
            }
            let depth = if yc < yu {
                (yu - yc).min(yc - top).min(horiz_in)
            } else if yc > yl {
                (yc - yl).min(bottom - yc).min(horiz_in)
            } else {
                0.0
            };
            let fade = ((depth - 1.5) / 2.0).clamp(0.0, 1.0);
            let noise = if fade > 0.0 {
                fade * TEXTURE_AMPLITUDE * texture(factors.texture_seed, geo.res, xc, yc)
            } else {
                0.0
            };
            let v = BACKGROUND + cov * (BONE - BACKGROUND) + noise;
            pixels.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(LabeledSample {
        image: ImageTensor::new(n, pixels)?,
        label: factors.label(config.gap_threshold),
        factors: factors.clone(),
    })
}

// --- dataset ---------------------------------------------------------------

#[derive(Clone, Copy)]
enum SplitTag {
    Train = 1,
    Val = 2,
    Test = 3,
}

fn generate_split(
    count: usize,
    seed: u64,
    tag: SplitTag,
    config: &SynthConfig,
) -> Result<Vec<LabeledSample>> {
    (0..count)
        .map(|i| {
            // Alternating target labels with rejection sampling keep every
            // split balanced to within one sample.
            let want = (i % 2) as u8;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[tag as u64, i as u64]));
            let factors = loop {
                let f = FactorVector::sample(&mut rng);
                if f.label(config.gap_threshold) == want {
                    break f;
                }
            };
            generate_sample_with(&factors, config)
        })
        .collect()
}

/// Bumped whenever rendering changes, so cached data and everything trained
/// on it goes stale.
pub const GENERATOR: &str = "two-mass-v4";

pub fn config_digest(config: &SynthConfig, counts: [usize; 3], seed: u64) -> String {
    let canonical = serde_json::json!({
        "resolution": config.resolution,
        "gap_threshold": config.gap_threshold,
        "counts": counts,
        "seed": seed,
        "generator": GENERATOR,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    resolution: usize,
) -> Result<DatasetSplit> {
    generate_dataset_with(
        n_train,
        n_val,
        n_test,
        seed,
        &SynthConfig {
            resolution,
            ..SynthConfig::default()
        },
    )
}

pub fn generate_dataset_with(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<DatasetSplit> {
    config.validate()?;
    for (name, n) in [("n_train", n_train), ("n_val", n_val), ("n_test", n_test)] {
        if n == 0 {
            return Err(LcxError::Config {
                path: name.into(),
                message: "must be > 0".into(),
            });
        }
    }
    Ok(DatasetSplit {
        train: generate_split(n_train, seed, SplitTag::Train, config)?,
        val: generate_split(n_val, seed, SplitTag::Val, config)?,
        test: generate_split(n_test, seed, SplitTag::Test, config)?,
        generation_seed: seed,
        config_digest: config_digest(config, [n_train, n_val, n_test], seed),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub filename: String,
    pub split: String,
    pub label: u8,
    pub factors: FactorVector,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generation_seed: u64,
    pub config_digest: String,
    pub resolution: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Reads the `manifest.json` written by [`export_dataset`].
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| LcxError::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes every sample as an 8-bit grayscale PNG plus `manifest.json`.
pub fn export_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LcxError::io(dir, e))?;
    let mut samples = Vec::with_capacity(split.len());
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for (i, s) in part.iter().enumerate() {
            let filename = format!("{name}_{i:05}.png");
            let path = dir.join(&filename);
            std::fs::write(&path, imageio::encode_gray_png(&s.image)?).map_err(|e| LcxError::io(&path, e))?;
            samples.push(ManifestEntry {
                filename,
                split: name.into(),
                label: s.label,
                factors: s.factors.clone(),
            });
        }
    }
    let manifest = DatasetManifest {
        generation_seed: split.generation_seed,
        config_digest: split.config_digest.clone(),
        resolution: split.resolution(),
        samples,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| LcxError::io(&path, e))
}

// --- gap oracle ------------------------------------------------------------

/// Result of [`measure_gap`]: a normalized width, or no detectable joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GapEstimate {
    Measured(f64),
    Unmeasurable,
}

impl GapEstimate {
    pub fn value(self) -> Option<f64> {
        match self {
            GapEstimate::Measured(v) => Some(v),
            GapEstimate::Unmeasurable => None,
        }
    }

    pub fn is_measured(self) -> bool {
        matches!(self, GapEstimate::Measured(_))
    }
}

impl Serialize for GapEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GapEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match Option::<f64>::deserialize(d)? {
            Some(v) => GapEstimate::Measured(v),
            None => GapEstimate::Unmeasurable,
        })
    }
}

fn gap_fraction(v: f32) -> f64 {
    ((BONE - v as f64) / (BONE - BACKGROUND)).clamp(0.0, 1.0)
}

/// Gap length in pixels for one column, or `None` when the column shows no
/// two-mass structure.
fn column_gap(col: &[f32]) -> Option<f64> {
    let n = col.len();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < n {
        if col[i] < 0.0 {
            let start = i;
            while i < n && col[i] < 0.0 {
                i += 1;
            }
            // Must be bounded by mass on both sides.
            if start > 0 && i < n && best.is_none_or(|(s, e)| i - start > e - s) {
                best = Some((start, i));
            }
        } else {
            i += 1;
        }
    }
    if let Some((start, end)) = best {
        let lo = start - 1;
        let hi = end.min(n - 1);
        return Some(col[lo..=hi].iter().map(|&v| gap_fraction(v)).sum());
    }
    // Sub-pixel joint: no pixel falls below threshold, look for a dip
    // between mass rows.
    let first_bone = col.iter().position(|&v| v >= 0.0)?;
    let last_bone = col.iter().rposition(|&v| v >= 0.0)?;
    if last_bone < first_bone + 2 {
        return None;
    }
    let (argmin, vmin) = (first_bone + 1..last_bone)
        .map(|r| (r, col[r]))
        .fold((first_bone + 1, f32::INFINITY), |acc, (r, v)| if v < acc.1 { (r, v) } else { acc });
    if vmin as f64 >= BONE - DIP_MARGIN {
        return None;
    }
    Some(col[argmin - 1..=argmin + 1].iter().map(|&v| gap_fraction(v)).sum())
}

/// Estimates the normalized gap width by scanning the central column band.
///
/// Per column, the longest below-zero run bounded by mass pixels is widened
/// by one row on each side and converted to a sub-pixel length using the
/// nominal mass/background intensities. The median over measurable columns
/// is renormalized by `resolution / 4` and clamped to `[0, 1]`. Fewer than
/// half measurable columns yields [`GapEstimate::Unmeasurable`].
pub fn measure_gap(image: &ImageTensor) -> GapEstimate {
    let n = image.resolution();
    if n < 8 {
        return GapEstimate::Unmeasurable;
    }
    let band = n / 8;
    let cols = (n / 2 - band)..(n / 2 + band);
    let total = cols.len();
    let mut column = vec![0.0f32; n];
    let mut widths: Vec<f64> = cols
        .filter_map(|c| {
            for (r, v) in column.iter_mut().enumerate() {
                *v = image.get(r, c);
            }
            column_gap(&column)
        })
        .collect();
    if widths.len() * 2 < total {
        return GapEstimate::Unmeasurable;
    }
    widths.sort_by(|a, b| a.total_cmp(b));
    let m = widths.len();
    let median = if m % 2 == 1 {
        widths[m / 2]
    } else {
        0.5 * (widths[m / 2 - 1] + widths[m / 2])
    };
    GapEstimate::Measured((median / (n as f64 / 4.0)).clamp(0.0, 1.0))
}

/// Rows spanned by the gap (inclusive start, exclusive end) widened by
/// `margin` pixels on each side, clamped to the image.
pub fn gap_band_rows(factors: &FactorVector, resolution: usize, margin: f64) -> (usize, usize) {
    let geo = Geometry::new(factors, resolution);
    let start = (geo.upper - margin).floor().max(0.0) as usize;
    let end = ((geo.lower + margin).ceil() as usize).min(resolution);
    (start, end)
}
