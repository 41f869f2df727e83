//! Contrastive multi-zoom: turns a squeezed attention map into several
//! low-overlap zoomed views for training and one centred view for testing.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Contrastive,
    Center,
    #[default]
    Full,
}

/// Normalized crop rectangle: top-left `(x, y)` and extent `(h, w)` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub w: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

const RECT_EPS: f64 = 1e-9;

impl CropRect {
    pub fn new(x: f64, y: f64, h: f64, w: f64, provenance: Provenance) -> Self {
        Self {
            x,
            y,
            h,
            w,
            provenance,
        }
    }

    pub fn full() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0, Provenance::Full)
    }

    /// Rectangle of extent `(h, w)` centred at `(cx, cy)`, translated (not
    /// shrunk) so that it stays inside the unit square.
    pub fn around(cx: f64, cy: f64, h: f64, w: f64, provenance: Provenance) -> Self {
        let h = h.clamp(0.0, 1.0);
        let w = w.clamp(0.0, 1.0);
        let x = (cx - w / 2.0).clamp(0.0, 1.0 - w);
        let y = (cy - h / 2.0).clamp(0.0, 1.0 - h);
        Self::new(x, y, h, w, provenance)
    }

    pub fn is_valid(&self) -> bool {
        self.x >= -RECT_EPS
            && self.y >= -RECT_EPS
            && self.h > 0.0
            && self.w > 0.0
            && self.x + self.w <= 1.0 + RECT_EPS
            && self.y + self.h <= 1.0 + RECT_EPS
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() && [self.x, self.y, self.h, self.w].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::CropOutOfBounds {
                x: self.x,
                y: self.y,
                h: self.h,
                w: self.w,
            })
        }
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection(&self, other: &CropRect) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        ix.max(0.0) * iy.max(0.0)
    }

    pub fn iou(&self, other: &CropRect) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Whether the normalized point lies inside the half-open rectangle.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// A single squeezed spatial attention map on the backbone's coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.height, self.width, self.data.iter().map(|v| v * c).collect())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Pixels with `a ≥ k · max(a)`. The arg-max always qualifies.
    pub fn active_mask(&self, k: f64) -> Vec<bool> {
        let max = self.max();
        let thr = k * max;
        self.data.iter().map(|&a| a >= thr || a == max).collect()
    }

    /// Splits a `B × H × W` tensor into per-image maps.
    pub fn from_batch(att_s: &Tensor) -> Result<Vec<AttentionMap>> {
        let (b, h, w) = att_s.dims3()?;
        let flat = att_s
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok((0..b)
            .map(|i| AttentionMap::new(h, w, flat[i * h * w..(i + 1) * h * w].to_vec()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmzConfig {
    /// Number of contrastive zoom views per image (Z_n).
    pub zoom_count: usize,
    /// Activation threshold as a fraction of the map maximum.
    pub threshold: f64,
    /// Symmetric beta-distribution parameter for crop centres.
    pub alpha: f64,
    /// Crop area fraction range.
    pub scale_range: (f64, f64),
    /// Crop aspect (w/h) range.
    pub ratio_range: (f64, f64),
    /// Output side of each zoomed view; 0 means the network input size.
    pub out_size: usize,
    pub center_margin: f64,
    pub center_min_side: f64,
}

impl Default for CmzConfig {
    fn default() -> Self {
        Self {
            zoom_count: 2,
            threshold: 0.5,
            alpha: 0.5,
            scale_range: (0.2, 0.6),
            ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            out_size: 0,
            center_margin: 0.1,
            center_min_side: 0.25,
        }
    }
}

impl CmzConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cmz: {m}")));
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad("threshold must lie in (0, 1]");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad("scale_range must satisfy 0 < min <= max <= 1");
        }
        let (r0, r1) = self.ratio_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("ratio_range must satisfy 0 < min <= max");
        }
        if !(self.center_min_side > 0.0 && self.center_min_side <= 1.0) {
            return bad("center_min_side must lie in (0, 1]");
        }
        if self.center_margin < 0.0 {
            return bad("center_margin must be non-negative");
        }
        Ok(())
    }

    pub fn out_size_for(&self, input_size: usize) -> usize {
        if self.out_size == 0 {
            input_size
        } else {
            self.out_size
        }
    }
}

/// Channel mean of a `B × A × H × W` attention stack.
pub fn squeeze_attention(att_ms: &Tensor) -> Result<Tensor> {
    let (_, a, _, _) = att_ms.dims4()?;
    if a == 0 {
        return Err(Error::ShapeMismatch("attention has zero channels".into()));
    }
    Ok(att_ms.mean(1)?)
}

/// Axis-aligned box of the supra-threshold region. The box of the convex
/// hull of a point set equals the box of the set itself.
pub fn gen_bbox(att: &AttentionMap, k: f64) -> CropRect {
    let mask = att.active_mask(k);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..att.height {
        for x in 0..att.width {
            if mask[y * att.width + x] {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    let (hh, ww) = (att.height as f64, att.width as f64);
    CropRect::new(
        x0 as f64 / ww,
        y0 as f64 / hh,
        (y1 - y0 + 1) as f64 / hh,
        (x1 - x0 + 1) as f64 / ww,
        Provenance::Full,
    )
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn sample_beta(rng: &mut impl Rng, alpha: f64) -> f64 {
    let u = match Beta::new(alpha, alpha) {
        Ok(beta) => beta.sample(rng),
        Err(_) => f64::NAN,
    };
    if u.is_finite() {
        u
    } else {
        // Numerical limit of a vanishing alpha: all mass at the endpoints.
        if rng.gen::<bool>() {
            1.0
        } else {
            0.0
        }
    }
}

/// Crop extent `(h, w)` for an area fraction `s` and aspect `r = w / h`.
pub fn crop_extent(s: f64, r: f64) -> (f64, f64) {
    ((s / r).sqrt().min(1.0), (s * r).sqrt().min(1.0))
}

/// One contrastive crop: random scale/aspect, centre drawn from a
/// symmetric beta over the attention box (U-shaped for `alpha < 1`).
pub fn contrastive_crop(bbox: &CropRect, cfg: &CmzConfig, rng: &mut impl Rng) -> CropRect {
    let s = uniform(rng, cfg.scale_range);
    let r = uniform(rng, cfg.ratio_range);
    let (h, w) = crop_extent(s, r);
    let u = sample_beta(rng, cfg.alpha);
    let v = sample_beta(rng, cfg.alpha);
    let cx = bbox.x + u * bbox.w;
    let cy = bbox.y + v * bbox.h;
    CropRect::around(cx, cy, h, w, Provenance::Contrastive)
}

#[derive(Debug, Clone)]
pub struct ZoomView {
    pub pixels: ImageBuf,
    pub rect: CropRect,
}

/// Crops `rect` from the image and resamples it to `out_size²`.
pub fn zoom(image: &ImageBuf, rect: &CropRect, out_size: usize) -> ImageBuf {
    image.sample_window(rect.x, rect.y, rect.w, rect.h, out_size, out_size, false)
}

/// `cfg.zoom_count` independent contrastive views of one image.
pub fn multi_zoom(
    image: &ImageBuf,
    att_s: &AttentionMap,
    cfg: &CmzConfig,
    rng: &mut impl Rng,
) -> Vec<ZoomView> {
    let bbox = gen_bbox(att_s, cfg.threshold);
    let out = cfg.out_size_for(image.height);
    (0..cfg.zoom_count)
        .map(|_| {
            let rect = contrastive_crop(&bbox, cfg, rng);
            ZoomView {
                pixels: zoom(image, &rect, out),
                rect,
            }
        })
        .collect()
}

/// Deterministic square crop around the attention-mass centroid of the
/// supra-threshold region.
pub fn center_rect(att_s: &AttentionMap, cfg: &CmzConfig) -> CropRect {
    let bbox = gen_bbox(att_s, cfg.threshold);
    let mask = att_s.active_mask(cfg.threshold);
    let (hh, ww) = (att_s.height as f64, att_s.width as f64);
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..att_s.height {
        for x in 0..att_s.width {
            if mask[y * att_s.width + x] {
                let a = att_s.get(y, x);
                mass += a;
                sx += a * (x as f64 + 0.5) / ww;
                sy += a * (y as f64 + 0.5) / hh;
            }
        }
    }
    let (cx, cy) = if mass > 0.0 && (sx / mass).is_finite() && (sy / mass).is_finite() {
        (sx / mass, sy / mass)
    } else {
        bbox.center()
    };
    let side = (bbox.h.max(bbox.w) * (1.0 + cfg.center_margin)).clamp(cfg.center_min_side, 1.0);
    CropRect::around(cx, cy, side, side, Provenance::Center)
}

pub fn center_zoom(image: &ImageBuf, att_s: &AttentionMap, cfg: &CmzConfig) -> ZoomView {
    let rect = center_rect(att_s, cfg);
    ZoomView {
        pixels: zoom(image, &rect, cfg.out_size_for(image.height)),
        rect,
    }
}

/// One audit line per emitted view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropLogRecord {
    pub sample_id: String,
    pub provenance: Provenance,
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub w: f64,
    pub seed: u64,
}

impl CropLogRecord {
    pub fn new(sample_id: impl Into<String>, rect: &CropRect, seed: u64) -> Self {
        Self {
            sample_id: sample_id.into(),
            provenance: rect.provenance,
            x: rect.x,
            y: rect.y,
            h: rect.h,
            w: rect.w,
            seed,
        }
    }

    pub fn rect(&self) -> CropRect {
        CropRect::new(self.x, self.y, self.h, self.w, self.provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hot_pixel(h: usize, w: usize, y: usize, x: usize) -> AttentionMap {
        let mut m = AttentionMap::constant(h, w, 0.0);
        m.data[y * w + x] = 1.0;
        m
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn squeeze_single_channel_is_identity() {
        let t = Tensor::rand(0f32, 1., (2, 1, 7, 7), &Device::Cpu).unwrap();
        let s = squeeze_attention(&t).unwrap();
        let d = (s - t.squeeze(1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn squeeze_two_channels_is_mean() {
        let mut v = vec![0.2f64; 49];
        v.extend(vec![0.8f64; 49]);
        let t = Tensor::from_vec(v, (1, 2, 7, 7), &Device::Cpu).unwrap();
        let s = squeeze_attention(&t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn squeeze_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, a, h, w) = (3, 5, 4, 6);
        let v: Vec<f64> = (0..b * a * h * w).map(|_| rng.gen()).collect();
        let t = Tensor::from_vec(v.clone(), (b, a, h, w), &Device::Cpu).unwrap();
        let s = squeeze_attention(&t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..a {
                        acc += v[((bi * a + c) * h + y) * w + x];
                    }
                    assert!((s[(bi * h + y) * w + x] - acc / a as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bbox_of_single_hot_pixel_is_its_cell() {
        let b = gen_bbox(&hot_pixel(7, 7, 3, 4), 0.5);
        assert!(close(b.x, 4.0 / 7.0) && close(b.y, 3.0 / 7.0));
        assert!(close(b.w, 1.0 / 7.0) && close(b.h, 1.0 / 7.0));
    }

    #[test]
    fn bbox_of_constant_map_is_full_frame() {
        for k in [0.1, 0.5, 1.0] {
            let b = gen_bbox(&AttentionMap::constant(7, 7, 0.3), k);
            assert!(close(b.x, 0.0) && close(b.y, 0.0) && close(b.w, 1.0) && close(b.h, 1.0));
        }
    }

    #[test]
    fn bbox_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = AttentionMap::new(7, 7, (0..49).map(|_| rng.gen::<f64>()).collect());
            let b = gen_bbox(&m, 0.5);
            let max = m.data.iter().cloned().fold(f64::MIN, f64::max);
            let pts: Vec<(usize, usize)> = (0..49)
                .filter(|&i| m.data[i] >= 0.5 * max)
                .map(|i| (i / 7, i % 7))
                .collect();
            let ymin = pts.iter().map(|p| p.0).min().unwrap();
            let ymax = pts.iter().map(|p| p.0).max().unwrap();
            let xmin = pts.iter().map(|p| p.1).min().unwrap();
            let xmax = pts.iter().map(|p| p.1).max().unwrap();
            assert!(close(b.y, ymin as f64 / 7.0) && close(b.x, xmin as f64 / 7.0));
            assert!(close(b.h, (ymax - ymin + 1) as f64 / 7.0));
            assert!(close(b.w, (xmax - xmin + 1) as f64 / 7.0));
        }
    }

    #[test]
    fn contrastive_crops_stay_inside_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CmzConfig::default();
        for _ in 0..2000 {
            let x = rng.gen::<f64>() * 0.9;
            let y = rng.gen::<f64>() * 0.9;
            let bbox = CropRect::new(x, y, (1.0 - y) * rng.gen::<f64>() + 1e-3, (1.0 - x) * rng.gen::<f64>() + 1e-3, Provenance::Full);
            let c = contrastive_crop(&bbox, &cfg, &mut rng);
            assert!(c.is_valid(), "{c:?}");
            assert_eq!(c.provenance, Provenance::Contrastive);
        }
    }

    #[test]
    fn vanishing_alpha_pushes_centres_to_box_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4000;
        let near_edge = (0..n)
            .filter(|_| {
                let u = sample_beta(&mut rng, 0.01);
                u < 0.01 || u > 0.99
            })
            .count();
        assert!(near_edge as f64 / n as f64 > 0.95, "{near_edge}");
    }

    #[test]
    fn unit_alpha_gives_uniform_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 20000;
        let draws: Vec<f64> = (0..n).map(|_| sample_beta(&mut rng, 1.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!((var - 1.0 / 12.0).abs() < 0.003);
        let low_quarter = draws.iter().filter(|&&u| u < 0.25).count() as f64 / n as f64;
        assert!((low_quarter - 0.25).abs() < 0.015);
    }

    #[test]
    fn contrastive_centres_overlap_less_than_fixed_centres() {
        // Same scale/aspect draws in both arms; only the centre rule differs.
        let cfg = CmzConfig {
            scale_range: (0.3, 0.3),
            ..CmzConfig::default()
        };
        let bbox = CropRect::full();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let (mut cmz, mut fixed) = (0.0, 0.0);
        for _ in 0..n {
            let a = contrastive_crop(&bbox, &cfg, &mut rng);
            let b = contrastive_crop(&bbox, &cfg, &mut rng);
            cmz += a.iou(&b);
            let (cx, cy) = bbox.center();
            let fa = CropRect::around(cx, cy, a.h, a.w, Provenance::Center);
            let fb = CropRect::around(cx, cy, b.h, b.w, Provenance::Center);
            fixed += fa.iou(&fb);
        }
        assert!(cmz / (n as f64) < fixed / (n as f64));
    }

    #[test]
    fn multi_zoom_emits_requested_views_deterministically() {
        let img = ImageBuf::from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let att = hot_pixel(7, 7, 2, 5);
        let cfg = CmzConfig::default();
        let a = multi_zoom(&img, &att, &cfg, &mut rng_for(&[1, 2, 3]));
        let b = multi_zoom(&img, &att, &cfg, &mut rng_for(&[1, 2, 3]));
        assert_eq!(a.len(), 2);
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!((va.pixels.height, va.pixels.width), (32, 32));
            assert_eq!(va.pixels, vb.pixels);
            assert_eq!(va.rect, vb.rect);
        }
    }

    #[test]
    fn zoom_of_constant_image_is_constant() {
        let img = ImageBuf::filled(20, 20, 3, 0.7);
        let views = multi_zoom(&img, &AttentionMap::constant(5, 5, 1.0), &CmzConfig { out_size: 13, ..Default::default() }, &mut rng_for(&[4]));
        for v in views {
            assert_eq!(v.pixels.height, 13);
            assert!(v.pixels.data.iter().all(|&p| (p - 0.7).abs() < 1e-6));
        }
    }

    #[test]
    fn center_zoom_on_hot_pixel_uses_min_side() {
        let cfg = CmzConfig::default();
        let r = center_rect(&hot_pixel(7, 7, 3, 4), &cfg);
        assert!(close(r.h, 0.25) && close(r.w, 0.25));
        let (cx, cy) = r.center();
        assert!(close(cx, 4.5 / 7.0) && close(cy, 3.5 / 7.0));
        // Corner pixel: clamped into the frame.
        let r = center_rect(&hot_pixel(7, 7, 0, 0), &cfg);
        assert!(close(r.x, 0.0) && close(r.y, 0.0) && r.is_valid());
    }

    #[test]
    fn center_zoom_on_constant_attention_is_full_frame() {
        let r = center_rect(&AttentionMap::constant(7, 7, 0.4), &CmzConfig::default());
        assert!(close(r.x, 0.0) && close(r.y, 0.0) && close(r.w, 1.0) && close(r.h, 1.0));
    }

    #[test]
    fn center_zoom_is_repeatable_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = ImageBuf::from_fn(24, 24, 3, |y, x, _| (y as f32 * 0.03 + x as f32 * 0.01).min(1.0));
        let cfg = CmzConfig::default();
        for _ in 0..100 {
            let att = AttentionMap::new(7, 7, (0..49).map(|_| rng.gen::<f64>()).collect());
            let a = center_zoom(&img, &att, &cfg);
            let b = center_zoom(&img, &att, &cfg);
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.rect, b.rect);
            let c = rng.gen_range(0.01..100.0);
            let s = center_rect(&att.scaled(c), &cfg);
            for (p, q) in [(s.x, a.rect.x), (s.y, a.rect.y), (s.h, a.rect.h), (s.w, a.rect.w)] {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn iou_basics() {
        let a = CropRect::new(0.0, 0.0, 0.5, 0.5, Provenance::Full);
        assert!(close(a.iou(&a), 1.0));
        let b = CropRect::new(0.5, 0.5, 0.5, 0.5, Provenance::Full);
        assert!(close(a.iou(&b), 0.0));
        let c = CropRect::new(0.25, 0.0, 0.5, 0.5, Provenance::Full);
        assert!(close(a.iou(&c), 0.125 / 0.375));
    }
}
