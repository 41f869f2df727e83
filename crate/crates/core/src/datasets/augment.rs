//! Stochastic training augmentation. Geometric transforms move the lesion
//! mask with the pixels; photometric ones leave it untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageBuf;

use super::ImageSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Hflip,
    Vflip,
    /// Quarter turn counter-clockwise.
    Rot90,
    Rotate {
        max_degrees: f64,
    },
    Affine {
        max_scale: f64,
        max_translate: f64,
        max_shear_degrees: f64,
    },
    Clahe {
        clip_limit: f64,
        tiles: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    #[serde(default = "default_probability")]
    pub p: f64,
}

fn default_probability() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Pick one transform uniformly, apply it with its probability.
    OneOf,
    /// Apply every transform independently with its probability.
    Each,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    pub transforms: Vec<TransformSpec>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        let t = |kind| TransformSpec { kind, p: 1.0 };
        Self {
            mode: AugmentMode::OneOf,
            transforms: vec![
                t(TransformKind::Rotate { max_degrees: 15.0 }),
                t(TransformKind::Hflip),
                t(TransformKind::Affine {
                    max_scale: 0.1,
                    max_translate: 0.05,
                    max_shear_degrees: 8.0,
                }),
                t(TransformKind::Clahe {
                    clip_limit: 2.0,
                    tiles: 8,
                }),
            ],
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            mode: AugmentMode::OneOf,
            transforms: Vec::new(),
        }
    }

    pub fn single(kind: TransformKind) -> Self {
        Self {
            mode: AugmentMode::OneOf,
            transforms: vec![TransformSpec { kind, p: 1.0 }],
        }
    }
}

pub fn augment(sample: &ImageSample, policy: &AugmentPolicy, rng: &mut impl Rng) -> ImageSample {
    let mut out = sample.clone();
    match policy.mode {
        AugmentMode::OneOf => {
            if !policy.transforms.is_empty() {
                let t = &policy.transforms[rng.gen_range(0..policy.transforms.len())];
                if rng.gen::<f64>() < t.p {
                    apply(&mut out, &t.kind, rng);
                }
            }
        }
        AugmentMode::Each => {
            for t in &policy.transforms {
                if rng.gen::<f64>() < t.p {
                    apply(&mut out, &t.kind, rng);
                }
            }
        }
    }
    out
}

fn apply(sample: &mut ImageSample, kind: &TransformKind, rng: &mut impl Rng) {
    let geometric = |s: &mut ImageSample, f: &dyn Fn(&ImageBuf) -> ImageBuf| {
        s.pixels = f(&s.pixels);
        if let Some(m) = &s.lesion_mask {
            s.lesion_mask = Some(f(m));
        }
    };
    match kind {
        TransformKind::Hflip => geometric(sample, &|i| i.flip_horizontal()),
        TransformKind::Vflip => geometric(sample, &|i| i.flip_vertical()),
        TransformKind::Rot90 => geometric(sample, &|i| i.rot90()),
        TransformKind::Rotate { max_degrees } => {
            let deg = rng.gen_range(-1.0..=1.0) * max_degrees;
            let m = Affine2::rotation(deg.to_radians());
            warp_sample(sample, &m);
        }
        TransformKind::Affine {
            max_scale,
            max_translate,
            max_shear_degrees,
        } => {
            let s = 1.0 + rng.gen_range(-1.0..=1.0) * max_scale;
            let sh = (rng.gen_range(-1.0..=1.0) * max_shear_degrees).to_radians().tan();
            let tx = rng.gen_range(-1.0..=1.0) * max_translate;
            let ty = rng.gen_range(-1.0..=1.0) * max_translate;
            let m = Affine2 {
                a: s,
                b: sh * s,
                c: 0.0,
                d: s,
                tx,
                ty,
            };
            warp_sample(sample, &m);
        }
        TransformKind::Clahe { clip_limit, tiles } => {
            sample.pixels = clahe(&sample.pixels, *clip_limit, *tiles);
        }
    }
}

/// Forward map about the image centre in normalized units:
/// `p' = [a b; c d] · p + t`.
#[derive(Debug, Clone, Copy)]
struct Affine2 {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    tx: f64,
    ty: f64,
}

impl Affine2 {
    fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            a: c,
            b: -s,
            c: s,
            d: c,
            tx: 0.0,
            ty: 0.0,
        }
    }

    fn inverse_apply(&self, x: f64, y: f64) -> (f64, f64) {
        let det = self.a * self.d - self.b * self.c;
        let (x, y) = (x - self.tx, y - self.ty);
        ((self.d * x - self.b * y) / det, (-self.c * x + self.a * y) / det)
    }
}

fn warp(img: &ImageBuf, m: &Affine2, nearest: bool) -> ImageBuf {
    let (h, w) = (img.height as f64, img.width as f64);
    let mut out = ImageBuf::new(img.height, img.width, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            // Normalized coordinates centred on the image, unit = image side.
            let nx = (x as f64 + 0.5) / w - 0.5;
            let ny = (y as f64 + 0.5) / h - 0.5;
            let (sx, sy) = m.inverse_apply(nx, ny);
            let fx = (sx + 0.5) * w - 0.5;
            let fy = (sy + 0.5) * h - 0.5;
            if fx < -0.5 || fy < -0.5 || fx > w - 0.5 || fy > h - 0.5 {
                continue;
            }
            for c in 0..img.channels {
                let v = if nearest {
                    let iy = (fy.round().max(0.0) as usize).min(img.height - 1);
                    let ix = (fx.round().max(0.0) as usize).min(img.width - 1);
                    img.get(iy, ix, c)
                } else {
                    img.bilinear_at(fy, fx, c)
                };
                out.set(y, x, c, v);
            }
        }
    }
    out
}

fn warp_sample(sample: &mut ImageSample, m: &Affine2) {
    sample.pixels = warp(&sample.pixels, m, false);
    if let Some(mask) = &sample.lesion_mask {
        sample.lesion_mask = Some(warp(mask, m, true));
    }
}

/// Contrast-limited adaptive histogram equalization on each channel, with
/// a `tiles × tiles` grid and OpenCV-style clip limit (relative to the mean
/// bin height).
pub fn clahe(img: &ImageBuf, clip_limit: f64, tiles: usize) -> ImageBuf {
    const BINS: usize = 256;
    let ty = tiles.clamp(1, img.height);
    let tx = tiles.clamp(1, img.width);
    let edges = |n: usize, t: usize| -> Vec<usize> { (0..=t).map(|i| i * n / t).collect() };
    let ey = edges(img.height, ty);
    let ex = edges(img.width, tx);
    let centre = |e: &[usize], i: usize| (e[i] + e[i + 1]) as f64 / 2.0 - 0.5;
    let quant = |v: f32| ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(BINS - 1);

    let mut out = img.clone();
    for c in 0..img.channels {
        // Per-tile lookup tables.
        let mut luts = vec![[0f32; BINS]; ty * tx];
        for i in 0..ty {
            for j in 0..tx {
                let mut hist = [0f64; BINS];
                for y in ey[i]..ey[i + 1] {
                    for x in ex[j]..ex[j + 1] {
                        hist[quant(img.get(y, x, c))] += 1.0;
                    }
                }
                let area = ((ey[i + 1] - ey[i]) * (ex[j + 1] - ex[j])) as f64;
                let clip = (clip_limit * area / BINS as f64).max(1.0);
                let mut excess = 0.0;
                for h in hist.iter_mut() {
                    if *h > clip {
                        excess += *h - clip;
                        *h = clip;
                    }
                }
                let bonus = excess / BINS as f64;
                let mut cdf = 0.0;
                let lut = &mut luts[i * tx + j];
                for (b, h) in hist.iter().enumerate() {
                    cdf += h + bonus;
                    lut[b] = (cdf / area) as f32;
                }
            }
        }
        // Bilinear blend between the four nearest tile centres.
        let locate = |p: f64, e: &[usize], t: usize| -> (usize, usize, f64) {
            if p <= centre(e, 0) {
                return (0, 0, 0.0);
            }
            if p >= centre(e, t - 1) {
                return (t - 1, t - 1, 0.0);
            }
            let mut k = 0;
            while k + 1 < t && centre(e, k + 1) < p {
                k += 1;
            }
            let (c0, c1) = (centre(e, k), centre(e, k + 1));
            (k, k + 1, (p - c0) / (c1 - c0))
        };
        for y in 0..img.height {
            let (i0, i1, wy) = locate(y as f64, &ey, ty);
            for x in 0..img.width {
                let (j0, j1, wx) = locate(x as f64, &ex, tx);
                let b = quant(img.get(y, x, c));
                let v00 = luts[i0 * tx + j0][b] as f64;
                let v01 = luts[i0 * tx + j1][b] as f64;
                let v10 = luts[i1 * tx + j0][b] as f64;
                let v11 = luts[i1 * tx + j1][b] as f64;
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bottom = v10 * (1.0 - wx) + v11 * wx;
                out.set(y, x, c, (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}
