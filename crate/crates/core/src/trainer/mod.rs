//! Two-phase training, inference and evaluation.

pub mod checkpoint;
pub mod data;
pub mod head;
pub mod inference;
pub mod model;
pub mod repr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::ClassMetrics;
use crate::nn::{Adam, AdamConfig};
use crate::rng::Rng;

pub use checkpoint::{Checkpoint, CheckpointHeader, Phase};
pub use data::{balanced_batches, load_dataset, Dataset};
pub use head::{train_head, HeadOutcome};
pub use inference::{evaluate, predict, Evaluation, Prediction};
pub use model::{Model, ModelSpec};
pub use repr::{train_representation, ReprOutcome};

pub const REPR_CHECKPOINT: &str = "repr.ckpt";
pub const HEAD_CHECKPOINT: &str = "head.ckpt";
pub const REPR_STEPS: &str = "repr_steps.jsonl";
pub const REPR_METRICS: &str = "repr_metrics.jsonl";
pub const HEAD_METRICS: &str = "head_metrics.jsonl";
pub const CROPS_LOG: &str = "crops.jsonl";

/// Prefix of optimizer moments stored next to model tensors.
const OPTIM: &str = "optim.";

/// Loss breakdown of one representation step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_pp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hcd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supcon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    pub s_t: f64,
    pub lambda: f64,
    pub balance_d: f64,
    pub skipped: bool,
}

/// One line of a per-epoch metric log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_pp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_norm_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub db_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(rename = "macro")]
    pub macro_avg: Option<ClassMetrics>,
}

fn adam_config(t: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig { lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }
}

/// Constant rate, or half-cosine decay across the phase when enabled.
pub fn learning_rate(base: f64, epoch: usize, epochs: usize, cosine: bool) -> f64 {
    if !cosine || epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn l2_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.clone()
            }
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn build_checkpoint(
    model: &Model,
    adam: &Adam,
    phase: Phase,
    epoch: usize,
    cfg: &Config,
    data: &Dataset,
    rng: Rng,
    history: &[EpochRecord],
) -> Result<Checkpoint> {
    let mut tensors: std::collections::BTreeMap<String, Tensor> = model.named_tensors().into_iter().collect();
    for (name, t) in adam.state_tensors() {
        tensors.insert(format!("{OPTIM}{name}"), t);
    }
    Ok(Checkpoint {
        header: CheckpointHeader {
            phase,
            epoch,
            model: model.spec.clone(),
            classes: data.classes.clone(),
            data_checksum: data.checksum.clone(),
            config: serde_json::to_value(cfg)?,
            rng,
            optimizer_step: adam.step,
            history: history.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?,
            tensors: Vec::new(),
        },
        tensors,
    })
}

/// Rebuilds a model from checkpoint tensors.
pub fn load_model(ckpt: &Checkpoint) -> Result<Model> {
    let model = Model::new(&ckpt.header.model, 0)?;
    model.load_tensors(&ckpt.tensors)?;
    Ok(model)
}

/// Fails when the checkpoint was trained for a different label set.
pub fn check_compatible(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    let k = ckpt.header.model.num_classes;
    if k != data.num_classes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained for {k} classes but the dataset has {} ({})",
            data.num_classes(),
            data.classes.join(", ")
        )));
    }
    if ckpt.header.classes != data.classes {
        log::warn!("checkpoint class names {:?} differ from dataset {:?}", ckpt.header.classes, data.classes);
    }
    if ckpt.header.data_checksum != data.checksum {
        log::warn!("dataset checksum differs from the one recorded in the checkpoint");
    }
    Ok(())
}
