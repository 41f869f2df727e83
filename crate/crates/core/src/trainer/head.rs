use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;

use crate::config::Config;
use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::evaluation::{classification_metrics, confusion};
use crate::image::ImageBuf;
use crate::jsonl::JsonlWriter;
use crate::nn::Adam;
use crate::rng::{derive_seed, rng_for, stream};

use super::model::HEAD;
use super::{
    adam_config, argmax, build_checkpoint, check_compatible, learning_rate, load_model, rows_f64, scalar, Checkpoint,
    Dataset, EpochRecord, Model, Phase, HEAD_CHECKPOINT, HEAD_METRICS,
};

pub struct HeadOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Accuracy of the final head on the cached train features.
    pub train_accuracy: f64,
}

fn features(model: &Model, cfg: &Config, samples: &[ImageSample]) -> Result<Option<Tensor>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let images: Vec<&ImageBuf> = samples.iter().map(|s| &s.pixels).collect();
    Ok(Some(model.head_features(&images, &cfg.cmz, cfg.train.head_batch_size)?.features.detach()))
}

fn predictions(model: &Model, feats: &Tensor) -> Result<Vec<usize>> {
    Ok(rows_f64(&model.head_logits(feats)?)?.iter().map(|r| argmax(r)).collect())
}

/// Fits a linear head to fixed `features` with cross-entropy. Everything
/// outside the head is left untouched and checked after every epoch.
pub fn fit_head(
    model: &Model,
    cfg: &Config,
    train: (&Tensor, &[usize]),
    val: Option<(&Tensor, &[usize])>,
    log: Option<&mut JsonlWriter>,
) -> Result<(Adam, Vec<EpochRecord>)> {
    let t = &cfg.train;
    let (x, labels) = train;
    let k = model.spec.num_classes;
    let target_all: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    model.initialize(derive_seed(&[t.seed, stream::HEAD]), HEAD)?;
    let frozen = model.frozen_hash()?;
    let mut adam = Adam::new(model.head_params(), adam_config(t, t.head_lr));
    let mut history = Vec::new();
    let mut log = log;
    for epoch in 0..t.head_epochs {
        let lr = learning_rate(t.head_lr, epoch, t.head_epochs, t.cosine);
        adam.config.lr = lr;
        let mut order: Vec<u32> = (0..labels.len() as u32).collect();
        order.shuffle(&mut rng_for(&[t.seed, stream::HEAD, epoch as u64]));
        let mut losses = Vec::new();
        let mut skipped = 0;
        for chunk in order.chunks(t.head_batch_size) {
            let idx = Tensor::new(chunk, x.device())?;
            let xb = x.index_select(&idx, 0)?;
            let yb = Tensor::new(chunk.iter().map(|&i| target_all[i as usize]).collect::<Vec<u32>>(), x.device())?;
            let loss = candle_nn::loss::cross_entropy(&model.head_logits(&xb)?, &yb)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                skipped += 1;
                continue;
            }
            adam.step(&loss.backward()?)?;
            losses.push(value);
        }
        let steps = labels.len().div_ceil(t.head_batch_size);
        if skipped as f64 > t.max_skip_fraction * steps as f64 {
            return Err(Error::NonFiniteLoss { skipped, steps });
        }
        if model.frozen_hash()? != frozen {
            return Err(Error::FrozenViolation(format!("epoch {epoch}")));
        }
        let train_metrics = classification_metrics(&confusion(labels, &predictions(model, x)?, k)?);
        let mut records = vec![EpochRecord {
            epoch,
            split: "train".into(),
            lr,
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            steps: Some(steps),
            skipped: Some(skipped),
            macro_avg: Some(train_metrics.macro_avg),
            ..Default::default()
        }];
        if let Some((vx, vy)) = val {
            let report = classification_metrics(&confusion(vy, &predictions(model, vx)?, k)?);
            records.push(EpochRecord { epoch, split: "val".into(), lr, macro_avg: Some(report.macro_avg), ..Default::default() });
        }
        for r in records {
            if let Some(w) = log.as_mut() {
                w.write(&r)?;
            }
            history.push(r);
        }
    }
    Ok((adam, history))
}

/// Phase two: frozen representation, eval-mode features without
/// augmentation, linear head trained with cross-entropy.
pub fn train_head(cfg: &Config, data: &Dataset, repr: &Checkpoint, out_dir: &Path) -> Result<HeadOutcome> {
    cfg.validate()?;
    check_compatible(repr, data)?;
    if data.train.is_empty() {
        return Err(Error::Config("the train split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = load_model(repr)?;
    let train_x = features(&model, cfg, &data.train)?.expect("train split is not empty");
    let train_y: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let val_x = features(&model, cfg, &data.val)?;
    let val_y: Vec<usize> = data.val.iter().map(|s| s.label).collect();
    let mut log = JsonlWriter::create(&out_dir.join(HEAD_METRICS))?;
    let (adam, head_history) = fit_head(
        &model,
        cfg,
        (&train_x, &train_y),
        val_x.as_ref().map(|x| (x, val_y.as_slice())),
        Some(&mut log),
    )?;
    log.flush()?;
    let preds = predictions(&model, &train_x)?;
    let train_accuracy = preds.iter().zip(&train_y).filter(|(p, y)| p == y).count() as f64 / train_y.len() as f64;

    let mut history: Vec<EpochRecord> = repr
        .header
        .history
        .iter()
        .map(|v| serde_json::from_value(v.clone()))
        .collect::<std::result::Result<_, _>>()?;
    history.extend(head_history.iter().cloned());
    let mut checkpoint = build_checkpoint(
        &model,
        &adam,
        Phase::Head,
        cfg.train.head_epochs,
        cfg,
        data,
        repr.header.rng.clone(),
        &history,
    )?;
    checkpoint.save(&out_dir.join(HEAD_CHECKPOINT))?;
    Ok(HeadOutcome { checkpoint, history: head_history, train_accuracy })
}
