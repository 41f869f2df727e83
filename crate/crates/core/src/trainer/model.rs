use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Linear, Module, VarBuilder, VarMap};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmz::{center_zoom, AttentionMap, CmzConfig, CropRect};
use crate::config::{Config, LossKind, Precision};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, ImageBuf};
use crate::loss::ProjectionHead;
use crate::msfe::{feature_vector, global_average_pool, Backbone, BackboneConfig};
use crate::nn::{hash_vars, sorted_vars};
use crate::rng::{rng_for, stream};
use crate::wsll::{AttentionBundle, Wsll, WsllConfig};

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub wsll: WsllConfig,
    pub projection_dim: usize,
    pub num_classes: usize,
    pub kind: LossKind,
    pub precision: Precision,
}

impl ModelSpec {
    pub fn from_config(cfg: &Config, num_classes: usize) -> Self {
        Self {
            backbone: cfg.backbone.clone(),
            wsll: cfg.wsll.clone(),
            projection_dim: cfg.loss.projection_dim,
            num_classes,
            kind: cfg.train.loss,
            precision: cfg.train.precision,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.channels().1
    }

    /// Width of the classification-head input.
    pub fn head_dim(&self) -> usize {
        if self.kind.uses_attention() {
            2 * self.feature_dim()
        } else {
            self.feature_dim()
        }
    }

    pub fn dtype(&self) -> DType {
        match self.precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Parameter groups by name prefix.
pub const BACKBONE: &str = "backbone.";
pub const WSLL: &str = "wsll.";
pub const PROJECTION: &str = "proj.";
pub const AUX: &str = "aux.";
pub const HEAD: &str = "head.";

pub struct Model {
    pub spec: ModelSpec,
    pub varmap: VarMap,
    pub device: Device,
    backbone: Backbone,
    wsll: Wsll,
    projection: ProjectionHead,
    aux: Linear,
    head: Linear,
}

/// Pooled representation of one batch of views.
pub struct Encoded {
    pub pooled: Tensor,
    pub bundle: Option<AttentionBundle>,
}

/// Eval-mode head input for a set of images.
pub struct HeadFeatures {
    pub features: Tensor,
    pub attention: Vec<AttentionMap>,
    pub center_rects: Vec<CropRect>,
}

fn name_seed(name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, spec.dtype(), &device);
        let (c14, c7) = spec.backbone.channels();
        let backbone = Backbone::new(vb.pp("backbone"), &spec.backbone)?;
        let wsll = Wsll::new(vb.pp("wsll"), c14, c7, &spec.wsll)?;
        let projection = ProjectionHead::new(vb.pp("proj"), c7, spec.projection_dim)?;
        let aux = candle_nn::linear(spec.head_dim(), spec.num_classes, vb.pp("aux"))?;
        let head = candle_nn::linear(spec.head_dim(), spec.num_classes, vb.pp("head"))?;
        let model = Self { spec: spec.clone(), varmap, device, backbone, wsll, projection, aux, head };
        model.initialize(seed, "")?;
        Ok(model)
    }

    /// Seeded re-initialization of every variable under `prefix`: He-normal
    /// convolutions, uniform ±1/√fan_in linear weights, zero biases, unit
    /// norm scales and fresh running statistics.
    pub fn initialize(&self, seed: u64, prefix: &str) -> Result<()> {
        for (name, var) in self.vars_with_prefix(prefix) {
            let dims = var.dims().to_vec();
            let n: usize = dims.iter().product();
            let mut rng = rng_for(&[seed, stream::INIT, name_seed(&name)]);
            let values: Vec<f64> = if name.ends_with("running_var") {
                vec![1.0; n]
            } else if name.ends_with("running_mean") || name.ends_with("bias") {
                vec![0.0; n]
            } else if dims.len() == 1 {
                vec![1.0; n]
            } else if dims.len() == 4 {
                let fan_in: usize = dims[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else {
                let bound = 1.0 / (dims[1] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            let t = Tensor::from_vec(values, dims.as_slice(), &self.device)?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        sorted_vars(&self.varmap).into_iter().filter(|(n, _)| n.starts_with(prefix)).collect()
    }

    /// Parameters updated by the representation phase (no running stats).
    pub fn representation_params(&self) -> Vec<(String, Var)> {
        sorted_vars(&self.varmap)
            .into_iter()
            .filter(|(n, _)| !n.starts_with(HEAD) && !is_running_stat(n))
            .collect()
    }

    pub fn head_params(&self) -> Vec<(String, Var)> {
        self.vars_with_prefix(HEAD)
    }

    /// Hash of trainable representation parameters.
    pub fn representation_hash(&self) -> Result<String> {
        Ok(hash_vars(&self.representation_params())?)
    }

    /// Hash of everything the head phase must leave untouched, running
    /// statistics included.
    pub fn frozen_hash(&self) -> Result<String> {
        let frozen: Vec<(String, Var)> = sorted_vars(&self.varmap).into_iter().filter(|(n, _)| !n.starts_with(HEAD)).collect();
        Ok(hash_vars(&frozen)?)
    }

    pub fn to_tensor(&self, images: &[&ImageBuf]) -> Result<Tensor> {
        Ok(images_to_tensor(images, &self.device)?.to_dtype(self.spec.dtype())?)
    }

    /// Backbone plus pooling. Without the localization branch the pooled
    /// feature is a plain global average.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<Encoded> {
        let pyramid = self.backbone.forward_features(images, train)?;
        if !self.spec.kind.uses_attention() {
            return Ok(Encoded { pooled: global_average_pool(&pyramid.feat_7)?, bundle: None });
        }
        let (bundle, pooled) = self.wsll.forward_t(&pyramid, train)?;
        Ok(Encoded { pooled: feature_vector(&pyramid, &pooled), bundle: Some(bundle) })
    }

    pub fn project(&self, pooled: &Tensor) -> Result<Tensor> {
        self.projection.project(pooled)
    }

    pub fn aux_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.aux.forward(features)?)
    }

    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(features)?)
    }

    /// Eval-mode global feature concatenated with the center-zoom feature
    /// (global feature only without attention), in chunks of `chunk`.
    pub fn head_features(&self, images: &[&ImageBuf], cmz: &CmzConfig, chunk: usize) -> Result<HeadFeatures> {
        let mut feats = Vec::new();
        let mut attention = Vec::new();
        let mut center_rects = Vec::new();
        for part in images.chunks(chunk.max(1)) {
            let x = self.to_tensor(part)?;
            let global = self.encode(&x, false)?;
            match &global.bundle {
                Some(bundle) => {
                    let maps = AttentionMap::from_batch(&bundle.att_s)?;
                    let zooms: Vec<_> = part.iter().zip(&maps).map(|(img, att)| center_zoom(img, att, cmz)).collect();
                    let zx = self.to_tensor(&zooms.iter().map(|z| &z.pixels).collect::<Vec<_>>())?;
                    let local = self.encode(&zx, false)?;
                    feats.push(Tensor::cat(&[&global.pooled, &local.pooled], 1)?);
                    center_rects.extend(zooms.iter().map(|z| z.rect));
                    attention.extend(maps);
                }
                None => {
                    feats.push(global.pooled.clone());
                    center_rects.extend(part.iter().map(|_| CropRect::full()));
                }
            }
        }
        if feats.is_empty() {
            return Err(Error::ShapeMismatch("no images to featurize".into()));
        }
        Ok(HeadFeatures { features: Tensor::cat(&feats, 0)?, attention, center_rects })
    }

    /// Named tensors for checkpointing, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        sorted_vars(&self.varmap).into_iter().map(|(n, v)| (n, v.as_tensor().clone())).collect()
    }

    pub fn load_tensors(&self, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in sorted_vars(&self.varmap) {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}
