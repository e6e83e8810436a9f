use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DataError};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
    Unknown,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
            Difficulty::Unknown => "unknown",
        }
    }
}

/// Images stored row-major, channels-last, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub difficulty: Vec<Difficulty>,
    pub split: String,
}

impl Dataset {
    pub fn new(
        image_size: usize,
        channels: usize,
        num_classes: usize,
        images: Vec<Vec<f32>>,
        labels: Vec<usize>,
        difficulty: Vec<Difficulty>,
        split: impl Into<String>,
    ) -> Result<Self, DataError> {
        let len = image_size * image_size * channels;
        if images.len() != labels.len() || images.len() != difficulty.len() {
            return Err(DataError::Mismatch(format!(
                "{} images, {} labels, {} difficulty tags",
                images.len(),
                labels.len(),
                difficulty.len()
            )));
        }
        if let Some(i) = images.iter().position(|im| im.len() != len) {
            return Err(DataError::Mismatch(format!(
                "image {i} has {} values, expected {len}",
                images[i].len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Mismatch(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            image_size,
            channels,
            num_classes,
            images,
            labels,
            difficulty,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Self {
        Self {
            image_size: self.image_size,
            channels: self.channels,
            num_classes: self.num_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            difficulty: indices.iter().map(|&i| self.difficulty[i]).collect(),
            split: split.into(),
        }
    }

    /// First `n` samples become `train`, the rest `test`.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head, "train"), self.subset(&tail, "test"))
    }

    /// Samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Little-endian dump of images and labels, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            out.extend_from_slice(&(l as u32).to_le_bytes());
            for x in im {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Two glyphs, one per image half; the class is the sum of their
    /// types modulo the class count, so no single patch decides it.
    #[default]
    GlyphPairs,
}

fn default_hard_fraction() -> f64 {
    0.5
}

fn default_noise() -> f64 {
    0.05
}

fn default_clutter() -> f64 {
    0.15
}

/// Synthetic classification task description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub image_size: usize,
    /// Glyph side; matches the model patch size so easy glyphs fill exactly
    /// one patch.
    pub glyph_size: usize,
    pub num_classes: usize,
    pub samples: usize,
    #[serde(default)]
    pub kind: GeneratorKind,
    /// Share of samples drawn as hard.
    #[serde(default = "default_hard_fraction")]
    pub hard_fraction: f64,
    /// Background pixel noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Probability that a background pixel of a hard sample is a speckle.
    #[serde(default = "default_clutter")]
    pub clutter_density: f64,
    /// Probability that a glyph pixel of a hard sample is erased.
    #[serde(default)]
    pub occlusion_fraction: f64,
}

pub const GLYPH_TYPES: usize = 4;

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |f: &str, m: String| Err(ConfigError::field(format!("data.synthetic.{f}"), m));
        if self.glyph_size < 4 || !self.glyph_size.is_multiple_of(2) {
            return err("glyph_size", format!("must be an even number ≥ 4, got {}", self.glyph_size));
        }
        if !self.image_size.is_multiple_of(self.glyph_size) {
            return err("image_size", "must be a multiple of glyph_size".into());
        }
        let grid = self.image_size / self.glyph_size;
        if grid < 4 || !grid.is_multiple_of(2) {
            return err(
                "image_size",
                format!("image must hold an even grid of at least 4x4 glyph cells, got {grid}x{grid}"),
            );
        }
        if !(2..=GLYPH_TYPES).contains(&self.num_classes) {
            return err("num_classes", format!("must lie in 2..={GLYPH_TYPES}"));
        }
        if self.samples == 0 {
            return err("samples", "must be positive".into());
        }
        for (name, v) in [
            ("hard_fraction", self.hard_fraction),
            ("clutter_density", self.clutter_density),
            ("occlusion_fraction", self.occlusion_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(name, format!("must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise_std >= 0.0) {
            return err("noise_std", "must be non-negative".into());
        }
        Ok(())
    }
}

/// Glyph bitmaps of side `s`; each has exactly `2s` ink pixels.
fn glyph(kind: usize, s: usize, y: usize, x: usize) -> bool {
    match kind {
        0 => y == 0 || y == s - 1,                   // top and bottom bars
        1 => x == 0 || x == s - 1,                   // left and right bars
        2 => y == x || y + x == s - 1,               // cross
        _ => y + 1 == s / 2 || y == s / 2,          // middle band
    }
}

/// Deterministic synthetic dataset; classes are balanced (`label = i mod C`)
/// and every sample carries its difficulty.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset, ConfigError> {
    spec.validate()?;
    let (size, s) = (spec.image_size, spec.glyph_size);
    let grid = size / s;
    let half = grid / 2;
    let c = spec.num_classes;
    let mut images = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut difficulty = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mut rng = stream(seed, &[tag::DATA, i as u64]);
        let label = i % c;
        let a = rng.random_range(0..GLYPH_TYPES);
        let base = (label + c - a % c) % c;
        let options: Vec<usize> = (0..GLYPH_TYPES).filter(|b| b % c == base).collect();
        let b = *options.choose(&mut rng).expect("some glyph type matches");
        let hard = rng.random_bool(spec.hard_fraction);

        let mut img = vec![0.0f32; size * size];
        let mut ink = vec![false; size * size];
        for (kind, half_row) in [(a, 0), (b, half)] {
            let (oy, ox) = if hard {
                // Straddle a 2x2 block of cells.
                let r = rng.random_range(0..half - 1);
                let col = rng.random_range(0..grid - 1);
                ((half_row + r) * s + s / 2, col * s + s / 2)
            } else {
                let r = rng.random_range(0..half);
                let col = rng.random_range(0..grid);
                ((half_row + r) * s, col * s)
            };
            for y in 0..s {
                for x in 0..s {
                    if glyph(kind, s, y, x) {
                        let k = (oy + y) * size + ox + x;
                        ink[k] = true;
                        let erased = hard && rng.random_bool(spec.occlusion_fraction);
                        img[k] = if erased { 0.0 } else { 1.0 };
                    }
                }
            }
        }
        for (k, px) in img.iter_mut().enumerate() {
            if hard && !ink[k] && rng.random_bool(spec.clutter_density) {
                *px = 0.5;
            }
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *px += (n * spec.noise_std) as f32;
        }
        images.push(img);
        labels.push(label);
        difficulty.push(if hard { Difficulty::Hard } else { Difficulty::Easy });
    }
    Ok(Dataset::new(size, 1, c, images, labels, difficulty, "all").expect("generator is consistent"))
}

/// Per-channel statistics used to normalize a folder dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn unreadable(path: &Path, message: impl ToString) -> DataError {
    DataError::Unreadable {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| unreadable(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| unreadable(dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// Loads `root/<class>/<image>` (PNG or PPM/PGM) in sorted order, resizes to
/// `image_size` and normalizes each channel to zero mean and unit variance.
pub fn load_image_folder(
    root: &Path,
    image_size: usize,
    channels: usize,
) -> Result<(Dataset, Normalization), DataError> {
    if channels != 1 && channels != 3 {
        return Err(DataError::Mismatch(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    let classes: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if classes.is_empty() {
        return Err(DataError::NoClasses {
            path: root.to_path_buf(),
        });
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(class_dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass {
                path: class_dir.clone(),
            });
        }
        for file in files {
            let img = image::open(&file).map_err(|e| unreadable(&file, e))?;
            let img = img.resize_exact(
                image_size as u32,
                image_size as u32,
                image::imageops::FilterType::Triangle,
            );
            let data: Vec<f32> = if channels == 1 {
                img.to_luma8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
            } else {
                img.to_rgb8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
            };
            images.push(data);
            labels.push(label);
        }
    }
    let count = (images.len() * image_size * image_size) as f64;
    let mut mean = vec![0.0; channels];
    for im in &images {
        for (k, &v) in im.iter().enumerate() {
            mean[k % channels] += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for im in &images {
        for (k, &v) in im.iter().enumerate() {
            let d = f64::from(v) - mean[k % channels];
            var[k % channels] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count).sqrt().max(1e-8))
        .collect();
    for im in &mut images {
        for (k, v) in im.iter_mut().enumerate() {
            let c = k % channels;
            *v = ((f64::from(*v) - mean[c]) / std[c]) as f32;
        }
    }
    let n = images.len();
    let dataset = Dataset::new(
        image_size,
        channels,
        classes.len(),
        images,
        labels,
        vec![Difficulty::Unknown; n],
        "all",
    )?;
    Ok((dataset, Normalization { mean, std }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(samples: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            image_size: 16,
            glyph_size: 4,
            num_classes: 4,
            samples,
            kind: GeneratorKind::GlyphPairs,
            hard_fraction: 0.5,
            noise_std: 0.05,
            clutter_density: 0.15,
            occlusion_fraction: 0.0,
        }
    }

    #[test]
    fn glyphs_have_equal_ink() {
        for s in [4, 6, 8] {
            let counts: Vec<usize> = (0..GLYPH_TYPES)
                .map(|k| (0..s * s).filter(|&i| glyph(k, s, i / s, i % s)).count())
                .collect();
            assert!(counts.iter().all(|&c| c == 2 * s), "side {s}: {counts:?}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&spec(64), 3).unwrap();
        let b = generate_synthetic(&spec(64), 3).unwrap();
        let c = generate_synthetic(&spec(64), 4).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn classes_balanced_and_both_difficulties_present() {
        for n in [64, 67, 1001] {
            let d = generate_synthetic(&spec(n), 1).unwrap();
            let h = d.class_histogram();
            assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1, "{h:?}");
        }
        let d = generate_synthetic(&spec(400), 1).unwrap();
        let hard = d.difficulty.iter().filter(|&&x| x == Difficulty::Hard).count();
        assert!((150..250).contains(&hard));
    }

    #[test]
    fn easy_glyphs_fill_single_cells() {
        let mut s = spec(50);
        s.noise_std = 0.0;
        s.hard_fraction = 0.0;
        let d = generate_synthetic(&s, 2).unwrap();
        for im in &d.images {
            let inked_cells = (0..16)
                .filter(|&p| {
                    let (r, c) = (p / 4, p % 4);
                    (0..16).any(|k| im[(r * 4 + k / 4) * 16 + c * 4 + k % 4] > 0.9)
                })
                .count();
            assert_eq!(inked_cells, 2);
        }
    }

    #[test]
    fn hard_glyphs_straddle_cells() {
        let mut s = spec(50);
        s.noise_std = 0.0;
        s.hard_fraction = 1.0;
        s.clutter_density = 0.0;
        let d = generate_synthetic(&s, 2).unwrap();
        for im in &d.images {
            let inked_cells = (0..16)
                .filter(|&p| {
                    let (r, c) = (p / 4, p % 4);
                    (0..16).any(|k| im[(r * 4 + k / 4) * 16 + c * 4 + k % 4] > 0.9)
                })
                .count();
            assert_eq!(inked_cells, 8);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(10);
        s.image_size = 8;
        assert!(s.validate().is_err());
        let mut s = spec(10);
        s.num_classes = 5;
        assert!(s.validate().unwrap_err().to_string().contains("num_classes"));
        let mut s = spec(10);
        s.clutter_density = 1.5;
        assert!(s.validate().is_err());
    }
}
