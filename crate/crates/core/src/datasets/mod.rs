//! Dataset manifests, preprocessing, augmentation and the synthetic generator.

pub mod augment;
pub mod manifest;
pub mod preprocess;
pub mod synthetic;

use crate::image::ImageBuf;

pub use augment::{augment, AugmentMode, AugmentPolicy, TransformKind, TransformSpec};
pub use manifest::{scan_dataset, DatasetManifest, Entry, Split, SplitRule};
pub use preprocess::{preprocess, preprocess_image};
pub use synthetic::{generate_synthetic, render_sample, synthesize_samples, SyntheticSpec};

/// One decoded image with values in `[0, 1]` and an optional binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: ImageBuf,
    pub label: usize,
    pub split: Split,
    pub lesion_mask: Option<ImageBuf>,
}
