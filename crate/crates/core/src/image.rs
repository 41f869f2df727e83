//! Dense HWC float images and the resampling primitives shared by
//! preprocessing, augmentation and zooming.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major `height × width × channels` image with `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_spatial_shape(&self, other: &ImageBuf) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Replicates a single-channel image into `channels` identical planes.
    pub fn replicate_channels(&self, channels: usize) -> ImageBuf {
        assert_eq!(self.channels, 1);
        ImageBuf::from_fn(self.height, self.width, channels, |y, x, _| {
            self.get(y, x, 0)
        })
    }

    pub fn to_rgb(&self) -> ImageBuf {
        match self.channels {
            3 => self.clone(),
            1 => self.replicate_channels(3),
            4 => ImageBuf::from_fn(self.height, self.width, 3, |y, x, c| self.get(y, x, c)),
            n => ImageBuf::from_fn(self.height, self.width, 3, |y, x, c| {
                self.get(y, x, c.min(n - 1))
            }),
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> ImageBuf {
        let grey = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if grey {
            let g = img.to_luma32f();
            let (w, h) = g.dimensions();
            ImageBuf {
                height: h as usize,
                width: w as usize,
                channels: 1,
                data: g.into_raw(),
            }
        } else {
            let rgb = img.to_rgb32f();
            let (w, h) = rgb.dimensions();
            ImageBuf {
                height: h as usize,
                width: w as usize,
                channels: 3,
                data: rgb.into_raw(),
            }
        }
    }

    pub fn open(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path).map_err(|e| Error::UndecodableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    /// Writes an 8-bit PNG (grey for one channel, RGB otherwise).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([q(self.get(y as usize, x as usize, 0))])
            });
            buf.save(path)?;
        } else {
            let rgb = self.to_rgb();
            let buf: RgbImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([q(rgb.get(y, x, 0)), q(rgb.get(y, x, 1)), q(rgb.get(y, x, 2))])
            });
            buf.save(path)?;
        }
        Ok(())
    }

    /// Integer-pixel crop; the window must lie inside the image.
    pub fn crop_pixels(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuf {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        ImageBuf::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Bilinear resize with corner-aligned sampling, so corner pixels map
    /// onto corner pixels and a same-size resize is the identity.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> ImageBuf {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = if out_h > 1 {
            (self.height - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let sx = if out_w > 1 {
            (self.width - 1) as f64 / (out_w - 1) as f64
        } else {
            0.0
        };
        let mut out = ImageBuf::new(out_h, out_w, self.channels);
        for y in 0..out_h {
            for x in 0..out_w {
                for c in 0..self.channels {
                    out.set(y, x, c, self.bilinear_at(y as f64 * sy, x as f64 * sx, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbour resize with the same corner-aligned mapping.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> ImageBuf {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = if out_h > 1 {
            (self.height - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let sx = if out_w > 1 {
            (self.width - 1) as f64 / (out_w - 1) as f64
        } else {
            0.0
        };
        ImageBuf::from_fn(out_h, out_w, self.channels, |y, x, c| {
            let sy = ((y as f64 * sy).round() as usize).min(self.height - 1);
            let sx = ((x as f64 * sx).round() as usize).min(self.width - 1);
            self.get(sy, sx, c)
        })
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the border.
    pub fn bilinear_at(&self, fy: f64, fx: f64, c: usize) -> f32 {
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let dy = (fy - y0 as f64) as f32;
        let dx = (fx - x0 as f64) as f32;
        let top = self.get(y0, x0, c) * (1.0 - dx) + self.get(y0, x1, c) * dx;
        let bottom = self.get(y1, x0, c) * (1.0 - dx) + self.get(y1, x1, c) * dx;
        top * (1.0 - dy) + bottom * dy
    }

    /// Resamples the normalized window `(x, y, w, h)` to `out_h × out_w`
    /// using pixel-centre coordinates. The full window at the native size
    /// reproduces the image exactly.
    pub fn sample_window(
        &self,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        out_h: usize,
        out_w: usize,
        nearest: bool,
    ) -> ImageBuf {
        let (hh, ww) = (self.height as f64, self.width as f64);
        let step_y = h * hh / out_h as f64;
        let step_x = w * ww / out_w as f64;
        ImageBuf::from_fn(out_h, out_w, self.channels, |oy, ox, c| {
            let fy = y * hh + (oy as f64 + 0.5) * step_y - 0.5;
            let fx = x * ww + (ox as f64 + 0.5) * step_x - 0.5;
            if nearest {
                let sy = (fy.round().max(0.0) as usize).min(self.height - 1);
                let sx = (fx.round().max(0.0) as usize).min(self.width - 1);
                self.get(sy, sx, c)
            } else {
                self.bilinear_at(fy, fx, c)
            }
        })
    }

    pub fn flip_horizontal(&self) -> ImageBuf {
        ImageBuf::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> ImageBuf {
        ImageBuf::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Rotates 90° counter-clockwise.
    pub fn rot90(&self) -> ImageBuf {
        ImageBuf::from_fn(self.width, self.height, self.channels, |y, x, c| {
            self.get(x, self.width - 1 - y, c)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Stacks RGB images into a `B × 3 × H × W` f32 tensor.
pub fn images_to_tensor(images: &[&ImageBuf], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {}x{} and {}x{} images",
                h, w, img.height, img.width
            )));
        }
        let rgb;
        let img = if img.channels == 3 {
            *img
        } else {
            rgb = img.to_rgb();
            &rgb
        };
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(y, x, c));
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBuf {
        ImageBuf::from_fn(h, w, 1, |y, x, _| (y * w + x) as f32)
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_ne!(img.flip_horizontal(), img);
    }

    #[test]
    fn four_quarter_turns_restore() {
        let img = ramp(4, 6);
        let r = img.rot90();
        assert_eq!((r.height, r.width), (6, 4));
        assert_eq!(r.rot90().rot90().rot90(), img);
    }

    #[test]
    fn full_window_at_native_size_is_identity() {
        let img = ramp(8, 8);
        let out = img.sample_window(0.0, 0.0, 1.0, 1.0, 8, 8, false);
        assert_eq!(out, img);
    }

    #[test]
    fn constant_window_stays_constant() {
        let img = ImageBuf::filled(10, 10, 3, 0.25);
        let out = img.sample_window(0.13, 0.4, 0.5, 0.31, 17, 9, false);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn tensor_stacking_layout() {
        let a = ImageBuf::from_fn(2, 2, 3, |y, x, c| (c * 100 + y * 10 + x) as f32);
        let t = images_to_tensor(&[&a], &Device::Cpu).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..4], &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(v[4], 100.0);
    }
}
