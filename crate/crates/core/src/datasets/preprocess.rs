use crate::cmz::CropRect;
use crate::error::{Error, Result};
use crate::image::ImageBuf;

use super::ImageSample;

fn pixel_window(rect: &CropRect, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let x0 = (rect.x * width as f64).round() as usize;
    let y0 = (rect.y * height as f64).round() as usize;
    let x1 = ((rect.x + rect.w) * width as f64).round() as usize;
    let y1 = ((rect.y + rect.h) * height as f64).round() as usize;
    let x0 = x0.min(width - 1);
    let y0 = y0.min(height - 1);
    let x1 = x1.clamp(x0 + 1, width);
    let y1 = y1.clamp(y0 + 1, height);
    (x0, y0, x1 - x0, y1 - y0)
}

/// Applies the optional device crop, then a corner-aligned bilinear resize
/// to `size × size`, clamping values into `[0, 1]`.
pub fn preprocess_image(raw: &ImageBuf, source_crop: Option<&CropRect>, size: usize) -> Result<ImageBuf> {
    if raw.height == 0 || raw.width == 0 {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    let cropped = match source_crop {
        Some(rect) => {
            rect.validate()?;
            let (x0, y0, w, h) = pixel_window(rect, raw.height, raw.width);
            raw.crop_pixels(x0, y0, w, h)
        }
        None => raw.clone(),
    };
    let mut out = cropped.resize_bilinear(size, size);
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Preprocesses pixels and mask with the same geometry.
pub fn preprocess(sample: &ImageSample, source_crop: Option<&CropRect>, size: usize) -> Result<ImageSample> {
    let pixels = preprocess_image(&sample.pixels, source_crop, size)?;
    let lesion_mask = match &sample.lesion_mask {
        Some(mask) => {
            if !mask.same_spatial_shape(&sample.pixels) {
                return Err(Error::ShapeMismatch(format!(
                    "mask {}x{} vs image {}x{}",
                    mask.height, mask.width, sample.pixels.height, sample.pixels.width
                )));
            }
            let cropped = match source_crop {
                Some(rect) => {
                    let (x0, y0, w, h) = pixel_window(rect, mask.height, mask.width);
                    mask.crop_pixels(x0, y0, w, h)
                }
                None => mask.clone(),
            };
            Some(cropped.resize_nearest(size, size))
        }
        None => None,
    };
    Ok(ImageSample {
        id: sample.id.clone(),
        pixels,
        label: sample.label,
        split: sample.split,
        lesion_mask,
    })
}
