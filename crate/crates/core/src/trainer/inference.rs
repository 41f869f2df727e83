use candle_core::{DType, Tensor};

use crate::cmz::{AttentionMap, CmzConfig, CropRect};
use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::evaluation::{classification_metrics, confusion, db_score, macro_auc, MetricsReport};
use crate::image::ImageBuf;

use super::{argmax, l2_rows, rows_f64, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
    /// Fused attention of the global view; absent for the baseline.
    pub attention: Option<AttentionMap>,
    pub center_rect: CropRect,
}

/// Deterministic inference: eval-mode global view plus the center zoom.
/// Also returns the head input features.
pub fn predict(model: &Model, images: &[&ImageBuf], cmz: &CmzConfig, chunk: usize) -> Result<(Vec<Prediction>, Tensor)> {
    let feats = model.head_features(images, cmz, chunk)?;
    let logits = model.head_logits(&feats.features)?.to_dtype(DType::F64)?;
    let probs = rows_f64(&candle_nn::ops::softmax_last_dim(&logits)?)?;
    let mut attention = feats.attention.into_iter();
    let preds = probs
        .into_iter()
        .zip(feats.center_rects)
        .map(|(p, rect)| Prediction { class: argmax(&p), probs: p, attention: attention.next(), center_rect: rect })
        .collect();
    Ok((preds, feats.features))
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// L2-normalized head input features, one row per sample.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// Metrics, macro AUC and the DB score of the normalized head inputs.
pub fn evaluate(model: &Model, samples: &[ImageSample], cmz: &CmzConfig, chunk: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let images: Vec<&ImageBuf> = samples.iter().map(|s| &s.pixels).collect();
    let (predictions, feats) = predict(model, &images, cmz, chunk)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let classes: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let mut report = classification_metrics(&confusion(&labels, &classes, model.spec.num_classes)?);
    let probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
    report.auc = macro_auc(&labels, &probs).map_err(|e| log::warn!("AUC unavailable: {e}")).ok();
    let features = l2_rows(&rows_f64(&feats)?);
    report.db_score = db_score(&features, &labels).map_err(|e| log::warn!("DB score unavailable: {e}")).ok();
    Ok(Evaluation { report, predictions, features, labels, ids: samples.iter().map(|s| s.id.clone()).collect() })
}
