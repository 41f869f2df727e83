//! TOML run configuration with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmz::CmzConfig;
use crate::datasets::{AugmentPolicy, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::msfe::BackboneConfig;
use crate::wsll::WsllConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A manifest JSON file.
    Manifest,
    /// A `root/<class>/<image>` tree split on the fly.
    Folder,
    /// The synthetic generator rendered in memory from `[synth]`.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: PathBuf,
    /// Split fractions and seed for `folder` sources.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Manifest,
            path: PathBuf::from("data/manifest.json"),
            train_fraction: 0.8,
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

/// Phase-one objective, which also selects the ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Hcd,
    Supcon,
    /// Global average pooling and cross-entropy; no localization branch.
    CeBaseline,
    /// Cross-entropy on global plus center-zoom features.
    CeWsll,
    /// Cross-entropy on global plus contrastive-zoom features.
    CeWsllCmz,
}

impl LossKind {
    pub fn uses_attention(self) -> bool {
        self != LossKind::CeBaseline
    }

    pub fn uses_contrastive_zooms(self) -> bool {
        matches!(self, LossKind::Hcd | LossKind::Supcon | LossKind::CeWsllCmz)
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, LossKind::Hcd | LossKind::Supcon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Representation-phase epochs.
    pub epochs: usize,
    pub head_epochs: usize,
    pub batch_size: usize,
    pub head_batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub head_lr: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Cosine learning-rate decay over each phase.
    pub cosine: bool,
    /// Abort once the share of skipped non-finite steps in an epoch exceeds this.
    pub max_skip_fraction: f64,
    /// Export validation features after every epoch.
    pub export_embeddings: bool,
    /// Write every contrastive crop rectangle to `crops.jsonl`.
    pub log_crops: bool,
    /// Per-step weight-sharing and unit-norm assertions.
    pub check_invariants: bool,
    pub precision: Precision,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 128,
            head_epochs: 32,
            batch_size: 64,
            head_batch_size: 64,
            lr: 1e-3,
            beta1: 0.97,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            head_lr: 1e-3,
            seed: 0,
            loss: LossKind::Hcd,
            cosine: false,
            max_skip_fraction: 0.01,
            export_embeddings: true,
            log_crops: false,
            check_invariants: true,
            precision: Precision::F32,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    CeBaseline,
    Wsll,
    WsllCmz,
    Cdnet,
    Supcon,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::CeBaseline => "ce_baseline",
            Arm::Wsll => "wsll",
            Arm::WsllCmz => "wsll_cmz",
            Arm::Cdnet => "cdnet",
            Arm::Supcon => "supcon",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Arm::CeBaseline => LossKind::CeBaseline,
            Arm::Wsll => LossKind::CeWsll,
            Arm::WsllCmz => LossKind::CeWsllCmz,
            Arm::Cdnet => LossKind::Hcd,
            Arm::Supcon => LossKind::Supcon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub arms: Vec<Arm>,
    /// Extra full-model arms, one per trade-off weight.
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub split: Split,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            arms: vec![Arm::CeBaseline, Arm::Wsll, Arm::WsllCmz, Arm::Cdnet, Arm::Supcon],
            lambdas: Vec::new(),
            seeds: vec![0, 1, 2],
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub augment: AugmentPolicy,
    pub backbone: BackboneConfig,
    pub wsll: WsllConfig,
    pub cmz: CmzConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

/// Keys that are absent from the serialized defaults but may be set.
const OPTIONAL_KEYS: &[&str] = &["backbone.channels"];

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            apply_override(&mut root, &canonical_key(key.trim()), value.trim())?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cmz.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size < 2 || t.head_batch_size < 1 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if !(t.lr > 0.0 && t.head_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.cmz.out_size != 0 && self.cmz.out_size != self.backbone.input_size {
            return Err(Error::Config(format!(
                "cmz.out_size ({}) must be 0 or equal backbone.input_size ({})",
                self.cmz.out_size, self.backbone.input_size
            )));
        }
        if t.loss == LossKind::CeWsllCmz && self.cmz.zoom_count == 0 {
            return Err(Error::Config("train.loss = ce_wsll_cmz needs cmz.zoom_count >= 1".into()));
        }
        if self.wsll.attention_channels == 0 {
            return Err(Error::Config("wsll.attention_channels must be positive".into()));
        }
        if self.data.source == DataSource::Synthetic {
            self.synth.validate()?;
        }
        Ok(())
    }
}

fn canonical_key(key: &str) -> String {
    if key == "loss" {
        "train.loss".to_string()
    } else if let Some(rest) = key.strip_prefix("loss_cfg.") {
        format!("loss.{rest}")
    } else {
        key.to_string()
    }
}

fn parse_value(text: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {text}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn apply_override(root: &mut toml::Value, key: &str, text: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().unwrap();
    let mut node = &mut *root;
    for p in parents {
        node = node
            .get_mut(*p)
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    let mut value = parse_value(text);
    match table.get(*last) {
        Some(existing) => {
            if let (toml::Value::Float(_), toml::Value::Integer(i)) = (existing, &value) {
                value = toml::Value::Float(*i as f64);
            }
            if let (toml::Value::Array(old), toml::Value::Array(new)) = (existing, &mut value) {
                if old.first().is_some_and(|v| v.is_float()) {
                    for v in new.iter_mut() {
                        if let toml::Value::Integer(i) = v {
                            *v = toml::Value::Float(*i as f64);
                        }
                    }
                }
            }
        }
        None if OPTIONAL_KEYS.contains(&key) => {}
        None => return Err(Error::Config(format!("unknown config key `{key}`"))),
    }
    table.insert((*last).to_string(), value);
    Ok(())
}
