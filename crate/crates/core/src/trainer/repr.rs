use std::path::Path;

use candle_core::Tensor;

use crate::cmz::{center_zoom, multi_zoom, AttentionMap, CropLogRecord, ZoomView};
use crate::config::{Config, LossKind};
use crate::datasets::{augment, ImageSample};
use crate::error::{Error, Result};
use crate::evaluation::{db_score, export_embeddings};
use crate::image::ImageBuf;
use crate::jsonl::JsonlWriter;
use crate::loss::{build_sets, hcd, max_norm_deviation, supcon_reference, EmbeddingBatch};
use crate::nn::Adam;
use crate::rng::{derive_seed, rng_for, stream};

use super::{
    adam_config, build_checkpoint, l2_rows, learning_rate, rows_f64, scalar, Checkpoint, Dataset, EpochRecord, Model,
    ModelSpec, Phase, StepRecord, CROPS_LOG, REPR_CHECKPOINT, REPR_METRICS, REPR_STEPS,
};

/// Largest tolerated deviation of a projection row from unit norm.
pub const NORM_TOLERANCE: f64 = 1e-6;

pub struct ReprOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Worst unit-norm deviation over every projected row of the run.
    pub max_norm_deviation: f64,
    pub steps: usize,
    pub skipped: usize,
}

struct StepLoss {
    loss: Tensor,
    record: StepRecord,
    norm_deviation: f64,
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let target = Tensor::new(labels.iter().map(|&y| y as u32).collect::<Vec<_>>(), logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &target)?)
}

fn check_norms(views: &[Tensor]) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut offset = 0;
    for v in views {
        let (row, dev) = max_norm_deviation(v)?;
        if dev > NORM_TOLERANCE {
            let norm = 1.0 + dev;
            return Err(Error::HypersphereViolation { row: offset + row, norm });
        }
        worst = worst.max(dev);
        offset += v.dim(0)?;
    }
    Ok(worst)
}

fn encode_zooms(model: &Model, views: &[Vec<ZoomView>], count: usize) -> Result<Vec<Tensor>> {
    let b = views.len();
    let images: Vec<&ImageBuf> = (0..count).flat_map(|z| views.iter().map(move |v| &v[z].pixels)).collect();
    let pooled = model.encode(&model.to_tensor(&images)?, true)?.pooled;
    (0..count).map(|z| Ok(pooled.narrow(0, z * b, b)?)).collect()
}

/// Forward pass and loss of one batch of train indices.
fn step_loss(
    model: &Model,
    cfg: &Config,
    data: &Dataset,
    batch: &[usize],
    epoch: usize,
    step: u64,
    mut crops: Option<&mut JsonlWriter>,
) -> Result<StepLoss> {
    let t = &cfg.train;
    let samples: Vec<ImageSample> = batch
        .iter()
        .map(|&i| {
            let s = &data.train[i];
            if t.augment {
                augment(s, &cfg.augment, &mut rng_for(&[t.seed, stream::AUGMENT, epoch as u64, i as u64]))
            } else {
                s.clone()
            }
        })
        .collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let images: Vec<&ImageBuf> = samples.iter().map(|s| &s.pixels).collect();
    let version = if t.check_invariants { Some(model.representation_hash()?) } else { None };

    let global = model.encode(&model.to_tensor(&images)?, true)?;
    let mut zooms: Vec<Tensor> = Vec::new();
    if let Some(bundle) = &global.bundle {
        let maps = AttentionMap::from_batch(&bundle.att_s)?;
        if t.loss.uses_contrastive_zooms() && cfg.cmz.zoom_count > 0 {
            let mut views = Vec::with_capacity(samples.len());
            for ((s, att), &i) in samples.iter().zip(&maps).zip(batch) {
                let seed = derive_seed(&[t.seed, stream::CMZ, epoch as u64, i as u64]);
                views.push(multi_zoom(&s.pixels, att, &cfg.cmz, &mut rng_for(&[seed])));
                if let Some(log) = crops.as_mut() {
                    for v in views.last().unwrap() {
                        log.write(&CropLogRecord::new(s.id.clone(), &v.rect, seed))?;
                    }
                }
            }
            zooms = encode_zooms(model, &views, cfg.cmz.zoom_count)?;
        } else if t.loss == LossKind::CeWsll {
            let views: Vec<Vec<ZoomView>> =
                samples.iter().zip(&maps).map(|(s, att)| vec![center_zoom(&s.pixels, att, &cfg.cmz)]).collect();
            zooms = encode_zooms(model, &views, 1)?;
        }
    }
    if let Some(before) = version {
        if model.representation_hash()? != before {
            return Err(Error::WeightSharing(step));
        }
    }

    let l = &cfg.loss;
    let mut record = StepRecord {
        step,
        epoch,
        s_t: l.s_t,
        lambda: l.lambda,
        balance_d: l.balance_d,
        ..Default::default()
    };
    let mut norm_deviation = 0.0;
    let loss = match t.loss {
        LossKind::Hcd | LossKind::Supcon => {
            let mut views = vec![model.project(&global.pooled)?];
            for z in &zooms {
                views.push(model.project(z)?);
            }
            if t.check_invariants {
                norm_deviation = check_norms(&views)?;
            }
            let eb = EmbeddingBatch::from_views(&views, &labels)?;
            if t.loss == LossKind::Hcd {
                let sets = build_sets(&eb.sample_index, &eb.labels, &eb.view_tags, l.anchors);
                let out = hcd(&eb, &sets, &views[1..], l)?;
                record.l_pp = Some(out.l_pp);
                record.l_dc = Some(out.l_dc);
                record.hcd = Some(scalar(&out.total)?);
                out.total
            } else {
                let loss = supcon_reference(&eb.vectors, &eb.labels, l.s_t)?;
                record.supcon = Some(scalar(&loss)?);
                loss
            }
        }
        LossKind::CeBaseline => cross_entropy(&model.aux_logits(&global.pooled)?, &labels)?,
        LossKind::CeWsll | LossKind::CeWsllCmz => {
            let mut terms = Vec::with_capacity(zooms.len());
            for z in &zooms {
                let fused = Tensor::cat(&[&global.pooled, z], 1)?;
                terms.push(cross_entropy(&model.aux_logits(&fused)?, &labels)?);
            }
            if terms.is_empty() {
                return Err(Error::Config("cross-entropy with zooms needs at least one zoom view".into()));
            }
            let n = terms.len() as f64;
            (Tensor::stack(&terms, 0)?.sum_all()? / n)?
        }
    };
    if !t.loss.is_contrastive() {
        record.ce = Some(scalar(&loss)?);
    }
    record.loss = scalar(&loss)?;
    Ok(StepLoss { loss, record, norm_deviation })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Validation features: exported per epoch and scored for cluster quality.
fn validation_record(model: &Model, cfg: &Config, data: &Dataset, epoch: usize, lr: f64, out_dir: &Path) -> Result<Option<EpochRecord>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let images: Vec<&ImageBuf> = data.val.iter().map(|s| &s.pixels).collect();
    let feats = model.head_features(&images, &cfg.cmz, cfg.train.head_batch_size)?;
    let rows = l2_rows(&rows_f64(&feats.features)?);
    let labels: Vec<usize> = data.val.iter().map(|s| s.label).collect();
    if cfg.train.export_embeddings {
        let ids: Vec<String> = data.val.iter().map(|s| s.id.clone()).collect();
        export_embeddings(&out_dir.join("embeddings").join(format!("val_epoch_{epoch:03}.bin")), &rows, &labels, &ids)?;
    }
    let db = match db_score(&rows, &labels) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("validation DB score unavailable: {e}");
            None
        }
    };
    Ok(Some(EpochRecord { epoch, split: "val".into(), lr, db_score: db, ..Default::default() }))
}

/// Phase one: backbone, localization branch and projection (or the auxiliary
/// classifier for the cross-entropy arms) trained on global and zoom views.
/// Writes the checkpoint and JSON-lines logs under `out_dir`.
pub fn train_representation(cfg: &Config, data: &Dataset, out_dir: &Path) -> Result<ReprOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let k = data.num_classes();
    if data.train.is_empty() {
        return Err(Error::Config("the train split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = Model::new(&ModelSpec::from_config(cfg, k), t.seed)?;
    let mut adam = Adam::new(model.representation_params(), adam_config(t, t.lr));
    let mut sampler = rng_for(&[t.seed, stream::SAMPLER]);
    let mut steps_log = JsonlWriter::create(&out_dir.join(REPR_STEPS))?;
    let mut metrics_log = JsonlWriter::create(&out_dir.join(REPR_METRICS))?;
    let mut crops_log = if t.log_crops { Some(JsonlWriter::create(&out_dir.join(CROPS_LOG))?) } else { None };
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let batch_size = t.batch_size.min(labels.len()).max(2);

    let mut history = Vec::new();
    let mut global_step = 0u64;
    let (mut total_steps, mut total_skipped) = (0usize, 0usize);
    let mut worst_norm = 0.0f64;
    for epoch in 0..t.epochs {
        let lr = learning_rate(t.lr, epoch, t.epochs, t.cosine);
        adam.config.lr = lr;
        let batches = super::balanced_batches(&labels, k, batch_size, &mut sampler)?;
        let (mut losses, mut pps, mut dcs) = (Vec::new(), Vec::new(), Vec::new());
        let mut skipped = 0usize;
        let mut epoch_norm = 0.0f64;
        for batch in &batches {
            global_step += 1;
            let out = match step_loss(&model, cfg, data, batch, epoch, global_step, crops_log.as_mut()) {
                Ok(out) => out,
                Err(Error::NoValidAnchor) => {
                    log::warn!("step {global_step}: no anchor with positives; batch skipped");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut record = out.record;
            if !record.loss.is_finite() {
                skipped += 1;
                record.skipped = true;
                log::warn!("step {global_step}: non-finite loss {}; batch skipped", record.loss);
                steps_log.write(&record)?;
                continue;
            }
            epoch_norm = epoch_norm.max(out.norm_deviation);
            let grads = out.loss.backward()?;
            adam.step(&grads)?;
            losses.push(record.loss);
            pps.extend(record.l_pp);
            dcs.extend(record.l_dc);
            steps_log.write(&record)?;
        }
        total_steps += batches.len();
        total_skipped += skipped;
        worst_norm = worst_norm.max(epoch_norm);
        if skipped as f64 > t.max_skip_fraction * batches.len() as f64 {
            steps_log.flush()?;
            return Err(Error::NonFiniteLoss { skipped, steps: batches.len() });
        }
        let train = EpochRecord {
            epoch,
            split: "train".into(),
            lr,
            loss: mean(&losses),
            l_pp: mean(&pps),
            l_dc: mean(&dcs),
            steps: Some(batches.len()),
            skipped: Some(skipped),
            max_norm_deviation: t.loss.is_contrastive().then_some(epoch_norm),
            ..Default::default()
        };
        log::info!("repr epoch {epoch}: loss {:?}", train.loss);
        metrics_log.write(&train)?;
        history.push(train);
        if let Some(val) = validation_record(&model, cfg, data, epoch, lr, out_dir)? {
            metrics_log.write(&val)?;
            history.push(val);
        }
    }
    steps_log.flush()?;
    metrics_log.flush()?;
    let mut checkpoint =
        build_checkpoint(&model, &adam, Phase::Repr, t.epochs, cfg, data, sampler, &history)?;
    checkpoint.save(&out_dir.join(REPR_CHECKPOINT))?;
    Ok(ReprOutcome { checkpoint, history, max_norm_deviation: worst_norm, steps: total_steps, skipped: total_skipped })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::jsonl::read_jsonl;
    use crate::msfe::BackboneConfig;
    use crate::trainer::load_dataset;

    pub(crate) fn tiny_config(loss: LossKind) -> Config {
        let mut cfg = Config::default();
        cfg.data.source = DataSource::Synthetic;
        cfg.synth.n_per_class = 10;
        cfg.synth.image_size = 40;
        cfg.backbone = BackboneConfig { input_size: 32, channels: Some((8, 12)), ..Default::default() };
        cfg.wsll.attention_channels = 4;
        cfg.loss.projection_dim = 8;
        cfg.train.loss = loss;
        cfg.train.epochs = 2;
        cfg.train.head_epochs = 3;
        cfg.train.batch_size = 10;
        cfg.train.head_batch_size = 16;
        cfg.train.seed = 7;
        cfg
    }

    #[test]
    fn every_arm_trains_and_logs() {
        for loss in [LossKind::Hcd, LossKind::Supcon, LossKind::CeBaseline, LossKind::CeWsll, LossKind::CeWsllCmz] {
            let cfg = tiny_config(loss);
            let data = load_dataset(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let out = train_representation(&cfg, &data, dir.path()).unwrap();
            assert_eq!(out.skipped, 0);
            assert!(out.max_norm_deviation < NORM_TOLERANCE);
            let steps: Vec<StepRecord> = read_jsonl(&dir.path().join(REPR_STEPS)).unwrap();
            assert_eq!(steps.len(), out.steps);
            assert!(steps.iter().all(|s| s.loss.is_finite()));
            assert_eq!(steps[0].hcd.is_some(), loss == LossKind::Hcd);
            assert_eq!(steps[0].ce.is_some(), !loss.is_contrastive());
            assert!(dir.path().join(REPR_CHECKPOINT).exists());
            assert!(dir.path().join("embeddings/val_epoch_001.bin").exists());
        }
    }

    #[test]
    fn hcd_with_no_zooms_and_no_decoupling_is_supcon_on_global_views() {
        let mut a = tiny_config(LossKind::Hcd);
        a.cmz.zoom_count = 0;
        a.loss.lambda = 0.0;
        a.loss.anchors = crate::loss::AnchorMode::AllViews;
        a.train.epochs = 1;
        let mut b = a.clone();
        b.train.loss = LossKind::Supcon;
        let data = load_dataset(&a).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train_representation(&a, &data, da.path()).unwrap();
        train_representation(&b, &data, db.path()).unwrap();
        let sa: Vec<StepRecord> = read_jsonl(&da.path().join(REPR_STEPS)).unwrap();
        let sb: Vec<StepRecord> = read_jsonl(&db.path().join(REPR_STEPS)).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x.loss - y.loss).abs() < 1e-4 * x.loss.abs().max(1.0), "{} vs {}", x.loss, y.loss);
        }
    }

    #[test]
    fn crop_log_lists_every_zoom() {
        let mut cfg = tiny_config(LossKind::Hcd);
        cfg.train.epochs = 1;
        cfg.train.log_crops = true;
        let data = load_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train_representation(&cfg, &data, dir.path()).unwrap();
        let crops: Vec<CropLogRecord> = read_jsonl(&dir.path().join(CROPS_LOG)).unwrap();
        assert_eq!(crops.len(), data.train.len() * cfg.cmz.zoom_count);
        assert!(crops.iter().all(|c| c.rect().is_valid()));
    }
}
