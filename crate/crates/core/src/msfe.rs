//! Multi-scale feature extractor with taps at strides 16 and 32.

use candle_core::{Tensor, D};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvBnRelu;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Tiny,
    /// Wider and deeper plain stack at EfficientNet-b3 tap widths.
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub input_size: usize,
    /// `(C14, C7)`; `None` takes the architecture default.
    pub channels: Option<(usize, usize)>,
    pub pretrained: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { arch: Arch::Tiny, input_size: 96, channels: None, pretrained: false }
    }
}

impl BackboneConfig {
    pub fn channels(&self) -> (usize, usize) {
        self.channels.unwrap_or(match self.arch {
            Arch::Tiny => (128, 256),
            Arch::Large => (136, 384),
        })
    }

    /// Spatial sizes of the two taps.
    pub fn tap_sizes(&self) -> (usize, usize) {
        (self.input_size / 16, self.input_size / 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "backbone.input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.pretrained {
            return Err(Error::Config("no pretrained weights are bundled; set backbone.pretrained = false".into()));
        }
        let (c14, c7) = self.channels();
        if c14 == 0 || c7 == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        Ok(())
    }

    /// Widths of the stem and the first three stages, and the number of
    /// extra stride-1 blocks per stage.
    fn layout(&self) -> ([usize; 3], usize) {
        match self.arch {
            Arch::Tiny => ([16, 32, 64], 0),
            Arch::Large => ([40, 48, 96], 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub feat_14: Tensor,
    pub feat_7: Tensor,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<ConvBnRelu>,
}

impl Stage {
    fn new(vb: VarBuilder, cin: usize, cout: usize, extra: usize) -> candle_core::Result<Self> {
        let mut blocks = vec![ConvBnRelu::new(vb.pp("0"), cin, cout, 2)?];
        for i in 0..extra {
            blocks.push(ConvBnRelu::new(vb.pp((i + 1).to_string()), cout, cout, 1)?);
        }
        Ok(Self { blocks })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_t(&h, train)?;
        }
        Ok(h)
    }
}

/// Five stride-2 stages; the fourth and fifth outputs are the taps.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(vb: VarBuilder, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (widths, extra) = config.layout();
        let (c14, c7) = config.channels();
        let chans = [3, widths[0], widths[1], widths[2], c14, c7];
        let stages = (0..5)
            .map(|i| Stage::new(vb.pp(format!("stage{i}")), chans[i], chans[i + 1], if i == 0 { 0 } else { extra }))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), stages })
    }

    pub fn forward_features(&self, images: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let dims = images.dims();
        let s = self.config.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::ShapeMismatch(format!("backbone expects B×3×{s}×{s}, got {dims:?}")));
        }
        let mut h = images.clone();
        for stage in &self.stages[..4] {
            h = stage.forward_t(&h, train)?;
        }
        let feat_7 = self.stages[4].forward_t(&h, train)?;
        Ok(FeaturePyramid { feat_14: h, feat_7 })
    }
}

/// Identity adapter from the pooled vector to the representation.
pub fn feature_vector(_pyramid: &FeaturePyramid, pooled: &Tensor) -> Tensor {
    pooled.clone()
}

/// Plain global average pool of a B×C×H×W map.
pub fn global_average_pool(feat: &Tensor) -> candle_core::Result<Tensor> {
    feat.flatten_from(2)?.mean(D::Minus1)
}
