//! Synthetic "tiny lesion" dataset: classes share one background stream
//! and differ only in small localized shapes.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::rng::{rng_for, stream, Rng as SeededRng};

use super::manifest::{partition, DatasetManifest, SplitRule, MASK_SUFFIX};
use super::{ImageSample, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Smooth low-frequency field with multiplicative correlated speckle.
    Speckle,
    /// Low-frequency field with light additive noise.
    Smooth,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionShape {
    Disc,
    Ring,
    Square,
    Plus,
    Triangle,
    Diamond,
    HollowSquare,
    XCross,
}

pub const LESION_SHAPES: [LesionShape; 8] = [
    LesionShape::Disc,
    LesionShape::Ring,
    LesionShape::Square,
    LesionShape::Plus,
    LesionShape::Triangle,
    LesionShape::Diamond,
    LesionShape::HollowSquare,
    LesionShape::XCross,
];

impl LesionShape {
    pub fn name(self) -> &'static str {
        match self {
            LesionShape::Disc => "disc",
            LesionShape::Ring => "ring",
            LesionShape::Square => "square",
            LesionShape::Plus => "plus",
            LesionShape::Triangle => "triangle",
            LesionShape::Diamond => "diamond",
            LesionShape::HollowSquare => "hollow_square",
            LesionShape::XCross => "x_cross",
        }
    }

    /// Membership test at pixel-centre coordinates `u, v ∈ (-1, 1)` of an
    /// `s`-pixel box. `slack` (one pixel) keeps every shape touching all
    /// four sides of its box.
    fn contains(self, u: f64, v: f64, side: usize) -> bool {
        let slack = 1.0 / side as f64;
        let r2 = u * u + v * v;
        let lim = 1.0 + slack;
        match self {
            LesionShape::Disc => r2 <= lim * lim,
            LesionShape::Ring => r2 <= lim * lim && r2 >= 0.5 * 0.5,
            LesionShape::Square => true,
            LesionShape::Plus => u.abs() <= 0.34 + slack || v.abs() <= 0.34 + slack,
            LesionShape::Triangle => u.abs() <= (v + 1.0) / 2.0 + slack,
            LesionShape::Diamond => u.abs() + v.abs() <= 1.0 + slack,
            LesionShape::HollowSquare => u.abs().max(v.abs()) >= 0.5,
            LesionShape::XCross => (u - v).abs() <= 0.4 + slack || (u + v).abs() <= 0.4 + slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub image_size: usize,
    pub n_classes: usize,
    /// Lesion side as a fraction of the image side.
    pub lesion_size_range: (f64, f64),
    /// Lesions per abnormal image; the normal class always has none.
    pub lesion_count_range: (usize, usize),
    pub background: Background,
    /// Additive lesion brightness range.
    pub contrast_range: (f64, f64),
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            image_size: 96,
            n_classes: 5,
            lesion_size_range: (0.06, 0.12),
            lesion_count_range: (1, 3),
            background: Background::Speckle,
            contrast_range: (0.25, 0.4),
            train_fraction: 0.8,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_classes < 2 || self.n_classes > LESION_SHAPES.len() + 1 {
            return bad(format!(
                "n_classes must lie in 2..={}, got {}",
                LESION_SHAPES.len() + 1,
                self.n_classes
            ));
        }
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive".into());
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16".into());
        }
        let (lo, hi) = self.lesion_size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad(format!("lesion_size_range ({lo}, {hi}) must lie in (0, 0.5]"));
        }
        let (c0, c1) = self.lesion_count_range;
        if c0 < 1 || c0 > c1 {
            return bad(format!("lesion_count_range ({c0}, {c1}) must satisfy 1 <= min <= max"));
        }
        let (k0, k1) = self.contrast_range;
        if !(k0 > 0.0 && k0 <= k1 && k1 <= 1.0) {
            return bad("contrast_range must lie in (0, 1]".into());
        }
        if !(self.train_fraction >= 0.0
            && self.val_fraction >= 0.0
            && self.train_fraction + self.val_fraction <= 1.0)
        {
            return bad("split fractions must be non-negative and sum to at most 1".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| {
                if c == 0 {
                    "c0_normal".to_string()
                } else {
                    format!("c{c}_{}", LESION_SHAPES[c - 1].name())
                }
            })
            .collect()
    }

    pub fn lesion_shape(&self, class: usize) -> Option<LesionShape> {
        (class > 0).then(|| LESION_SHAPES[class - 1])
    }
}

fn background(spec: &SyntheticSpec, index: usize) -> ImageBuf {
    let n = spec.image_size;
    let mut rng = rng_for(&[spec.seed, stream::BACKGROUND, index as u64]);
    let base = 0.25 + 0.1 * rng.gen::<f64>();
    if spec.background == Background::Flat {
        return ImageBuf::from_fn(n, n, 1, |_, _, _| {
            (base + 0.02 * (rng.gen::<f64>() - 0.5)) as f32
        });
    }
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen::<f64>(),
                rng.gen::<f64>(),
                0.15 + 0.25 * rng.gen::<f64>(),
                0.2 * (rng.gen::<f64>() - 0.3),
            )
        })
        .collect();
    let field = |y: usize, x: usize| {
        let (fy, fx) = ((y as f64 + 0.5) / n as f64, (x as f64 + 0.5) / n as f64);
        base + blobs
            .iter()
            .map(|(cx, cy, s, a)| a * (-((fx - cx).powi(2) + (fy - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum::<f64>()
    };
    match spec.background {
        Background::Smooth => ImageBuf::from_fn(n, n, 1, |y, x, _| {
            (field(y, x) + 0.03 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0) as f32
        }),
        _ => {
            // Rayleigh speckle, smoothed over a 3×3 box for spatial correlation.
            let raw: Vec<f64> = (0..n * n)
                .map(|_| {
                    let u: f64 = rng.gen::<f64>().max(1e-12);
                    (-2.0 * u.ln()).sqrt() / 1.2533
                })
                .collect();
            ImageBuf::from_fn(n, n, 1, |y, x, _| {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                            acc += raw[yy as usize * n + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                let speckle = 0.6 + 0.4 * acc / cnt;
                (field(y, x) * speckle).clamp(0.0, 1.0) as f32
            })
        }
    }
}

/// Placed lesion: shape box top-left corner and side in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

fn place_lesions(spec: &SyntheticSpec, rng: &mut SeededRng) -> Vec<Lesion> {
    let n = spec.image_size;
    let count = rng.gen_range(spec.lesion_count_range.0..=spec.lesion_count_range.1);
    let margin = n / 16;
    let mut placed: Vec<Lesion> = Vec::new();
    for _ in 0..count {
        let (lo, hi) = spec.lesion_size_range;
        let frac = lo + (hi - lo) * rng.gen::<f64>();
        let side = ((frac * n as f64).round() as usize).max(2).min(n - 2 * margin);
        let span = n - 2 * margin - side;
        let mut candidate = Lesion { x0: 0, y0: 0, side };
        for _attempt in 0..50 {
            candidate.x0 = margin + rng.gen_range(0..=span);
            candidate.y0 = margin + rng.gen_range(0..=span);
            let clear = placed.iter().all(|p| {
                candidate.x0 > p.x0 + p.side
                    || p.x0 > candidate.x0 + candidate.side
                    || candidate.y0 > p.y0 + p.side
                    || p.y0 > candidate.y0 + candidate.side
            });
            if clear {
                break;
            }
        }
        placed.push(candidate);
    }
    placed
}

/// Renders one single-channel image and its binary lesion mask. The
/// background depends only on `(seed, index)`, never on the class.
pub fn render_sample(spec: &SyntheticSpec, class: usize, index: usize) -> (ImageBuf, ImageBuf, Vec<Lesion>) {
    let n = spec.image_size;
    let mut img = background(spec, index);
    let mut mask = ImageBuf::new(n, n, 1);
    let Some(shape) = spec.lesion_shape(class) else {
        return (img, mask, Vec::new());
    };
    let mut rng = rng_for(&[spec.seed, stream::LESION, class as u64, index as u64]);
    let lesions = place_lesions(spec, &mut rng);
    for l in &lesions {
        let (k0, k1) = spec.contrast_range;
        let contrast = (k0 + (k1 - k0) * rng.gen::<f64>()) as f32;
        for y in l.y0..l.y0 + l.side {
            for x in l.x0..l.x0 + l.side {
                let u = ((x - l.x0) as f64 + 0.5) / l.side as f64 * 2.0 - 1.0;
                let v = ((y - l.y0) as f64 + 0.5) / l.side as f64 * 2.0 - 1.0;
                if shape.contains(u, v, l.side) && mask.get(y, x, 0) == 0.0 {
                    mask.set(y, x, 0, 1.0);
                    let bg = img.get(y, x, 0);
                    img.set(y, x, 0, (bg + contrast).min(1.0));
                }
            }
        }
    }
    (img, mask, lesions)
}

/// Renders every sample in memory (RGB-replicated pixels), in the same
/// split assignment `generate_synthetic` writes to disk.
pub fn synthesize_samples(spec: &SyntheticSpec, split: Option<Split>) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let manifest = synthetic_manifest(spec, Path::new("."));
    let mut out = Vec::new();
    for s in Split::ALL {
        if split.is_some_and(|want| want != s) {
            continue;
        }
        for e in manifest.entries(s) {
            let index = index_from_path(&e.path);
            let (img, mask, _) = render_sample(spec, e.label, index);
            out.push(ImageSample {
                id: e.sample_id(),
                pixels: img.replicate_channels(3),
                label: e.label,
                split: s,
                lesion_mask: Some(mask),
            });
        }
    }
    Ok(out)
}

fn file_name(class_name: &str, index: usize) -> String {
    format!("{class_name}_{index:05}.png")
}

fn index_from_path(path: &Path) -> usize {
    let stem = path.file_stem().unwrap().to_string_lossy();
    stem.rsplit('_').next().unwrap().parse().unwrap()
}

fn synthetic_manifest(spec: &SyntheticSpec, root: &Path) -> DatasetManifest {
    let names = spec.class_names();
    let per_class: Vec<Vec<PathBuf>> = names
        .iter()
        .map(|name| {
            (0..spec.n_per_class)
                .map(|i| PathBuf::from(name).join(file_name(name, i)))
                .collect()
        })
        .collect();
    let rule = SplitRule::Stratified {
        train: spec.train_fraction,
        val: spec.val_fraction,
        seed: spec.seed,
    };
    DatasetManifest {
        root: root.to_path_buf(),
        classes: names,
        splits: partition(&per_class, rule),
        source_crop: None,
    }
}

/// Writes images, `_mask` PNGs and `manifest.json` under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let manifest = synthetic_manifest(spec, out_dir);
    for (class, name) in manifest.classes.iter().enumerate() {
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.n_per_class {
            let (img, mask, _) = render_sample(spec, class, i);
            let path = dir.join(file_name(name, i));
            img.replicate_channels(3).save_png(&path)?;
            let stem = path.file_stem().unwrap().to_string_lossy().to_string();
            mask.save_png(&dir.join(format!("{stem}{MASK_SUFFIX}.png")))?;
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
