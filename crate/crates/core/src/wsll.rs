//! Weakly-supervised lesion localization: texture and semantic attention
//! adaptors, their fusion, and multi-channel spatial pooling (MCSP).

use candle_core::{Tensor, D};
use candle_nn::{ModuleT, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::cmz::squeeze_attention;
use crate::error::{Error, Result};
use crate::msfe::FeaturePyramid;
use crate::nn::{batch_norm, Conv2d};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsllConfig {
    pub attention_channels: usize,
}

impl Default for WsllConfig {
    fn default() -> Self {
        Self { attention_channels: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBundle {
    pub att_txt: Tensor,
    pub att_sem: Tensor,
    pub att_ms: Tensor,
    /// Channel mean of `att_ms`, B×H×W.
    pub att_s: Tensor,
}

/// 1×1 convolution, batch-norm, sigmoid.
#[derive(Debug, Clone)]
struct Adaptor {
    conv: Conv2d,
    bn: candle_nn::BatchNorm,
}

impl Adaptor {
    fn new(vb: VarBuilder, cin: usize, a: usize) -> candle_core::Result<Self> {
        Ok(Self {
            conv: Conv2d::new(vb.pp("conv"), cin, a, 1, 1, true)?,
            bn: batch_norm(vb.pp("bn"), a)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        candle_nn::ops::sigmoid(&self.bn.forward_t(&self.conv.forward(x)?, train)?)
    }
}

#[derive(Debug, Clone)]
pub struct Wsll {
    texture: Adaptor,
    semantic: Adaptor,
    pub attention_channels: usize,
}

impl Wsll {
    pub fn new(vb: VarBuilder, c14: usize, c7: usize, cfg: &WsllConfig) -> Result<Self> {
        if cfg.attention_channels == 0 {
            return Err(Error::Config("wsll.attention_channels must be positive".into()));
        }
        let a = cfg.attention_channels;
        Ok(Self {
            texture: Adaptor::new(vb.pp("texture"), c14, a)?,
            semantic: Adaptor::new(vb.pp("semantic"), c7, a)?,
            attention_channels: a,
        })
    }

    /// Texture map from the stride-16 tap, pooled 2×2 to the stride-32 grid.
    pub fn texture_attention(&self, feat_14: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = feat_14.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("texture tap {h}×{w} is not even-sized")));
        }
        Ok(self.texture.forward_t(feat_14, train)?.avg_pool2d(2)?)
    }

    pub fn semantic_attention(&self, feat_7: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.semantic.forward_t(feat_7, train)?)
    }

    pub fn attend(&self, pyramid: &FeaturePyramid, train: bool) -> Result<AttentionBundle> {
        let att_txt = self.texture_attention(&pyramid.feat_14, train)?;
        let att_sem = self.semantic_attention(&pyramid.feat_7, train)?;
        let att_ms = fuse_attention(&att_txt, &att_sem)?;
        let att_s = squeeze_attention(&att_ms)?;
        Ok(AttentionBundle { att_txt, att_sem, att_ms, att_s })
    }

    /// Attention bundle and MCSP-pooled feature (B×C7).
    pub fn forward_t(&self, pyramid: &FeaturePyramid, train: bool) -> Result<(AttentionBundle, Tensor)> {
        let bundle = self.attend(pyramid, train)?;
        let pooled = mcsp(&pyramid.feat_7, &bundle.att_ms)?;
        Ok((bundle, pooled))
    }
}

pub fn fuse_attention(att_txt: &Tensor, att_sem: &Tensor) -> Result<Tensor> {
    if att_txt.dims() != att_sem.dims() {
        return Err(Error::ShapeMismatch(format!(
            "attention maps {:?} and {:?} differ",
            att_txt.dims(),
            att_sem.dims()
        )));
    }
    Ok((att_txt + att_sem)?)
}

/// Attention-weighted spatial average per attention channel, averaged over
/// channels: B×C×H×W, B×A×H×W → B×C.
pub fn mcsp(feat_7: &Tensor, att_ms: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feat_7.dims4()?;
    let (ba, a, ha, wa) = att_ms.dims4()?;
    if b != ba || h != ha || w != wa {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} vs attention {:?}",
            feat_7.dims(),
            att_ms.dims()
        )));
    }
    let att = att_ms.reshape((b, a, h * w))?;
    let sums = att.sum(D::Minus1)?;
    let host = sums.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(i) = host.iter().position(|s| s.abs() < 1e-12) {
        return Err(Error::DegenerateAttention { sample: i / a, channel: i % a });
    }
    let weighted = feat_7
        .reshape((b, c, h * w))?
        .matmul(&att.transpose(1, 2)?.contiguous()?)?;
    let per_channel = weighted.broadcast_div(&sums.reshape((b, 1, a))?)?;
    Ok(per_channel.mean(D::Minus1)?)
}
