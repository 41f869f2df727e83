//! Projection head, extended contrastive sets, the pull-push and decoupling
//! losses, their weighted sum, and a supervised-contrastive reference.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Only global-view rows act as anchors.
    ImagesOnly,
    AllViews,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Logit scale applied to cosines (inverse temperature).
    pub s_t: f64,
    /// Weight of the off-diagonal decoupling term.
    pub balance_d: f64,
    pub lambda: f64,
    pub anchors: AnchorMode,
    pub projection_dim: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { s_t: 10.0, balance_d: 0.05, lambda: 0.1, anchors: AnchorMode::AllViews, projection_dim: 128 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_t > 0.0) {
            return Err(Error::Config(format!("loss.s_t must be positive, got {}", self.s_t)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.balance_d) {
            return Err(Error::Config(format!("loss.balance_d must lie in [0, 1], got {}", self.balance_d)));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("loss.projection_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Global,
    /// Zoom view number, starting at 1.
    Zoom(usize),
}

/// Rows of unit vectors with per-row image index, label and view tag.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub vectors: Tensor,
    pub sample_index: Vec<usize>,
    pub labels: Vec<usize>,
    pub view_tags: Vec<ViewTag>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Tensor, sample_index: Vec<usize>, labels: Vec<usize>, view_tags: Vec<ViewTag>) -> Result<Self> {
        let m = vectors.dims2()?.0;
        if sample_index.len() != m || labels.len() != m || view_tags.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "{m} rows but {} indices, {} labels, {} tags",
                sample_index.len(),
                labels.len(),
                view_tags.len()
            )));
        }
        Ok(Self { vectors, sample_index, labels, view_tags })
    }

    /// Stacks `views[0]` (global) and `views[1..]` (zooms), each b×d and
    /// aligned by image, into one view-major batch.
    pub fn from_views(views: &[Tensor], labels: &[usize]) -> Result<Self> {
        let b = labels.len();
        for v in views {
            if v.dims2()?.0 != b {
                return Err(Error::ShapeMismatch(format!("view has {} rows, expected {b}", v.dims2()?.0)));
            }
        }
        let vectors = Tensor::cat(views, 0)?;
        let n = views.len();
        let sample_index = (0..n).flat_map(|_| 0..b).collect();
        let all_labels = (0..n).flat_map(|_| labels.iter().copied()).collect();
        let view_tags = (0..n)
            .flat_map(|v| std::iter::repeat(if v == 0 { ViewTag::Global } else { ViewTag::Zoom(v) }).take(b))
            .collect();
        Self::new(vectors, sample_index, all_labels, view_tags)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    /// Zoom rows of the anchor's own image, the anchor itself excluded.
    pub own_zooms: Vec<Vec<usize>>,
    /// Rows eligible as anchors under the chosen mode.
    pub anchors: Vec<usize>,
    /// Eligible rows skipped for an empty positive set.
    pub singletons: Vec<usize>,
}

/// Positive set: every other row of the same class, which covers the
/// anchor's own zooms and the zooms of same-class images. Negative set:
/// every row of another class. Depends only on labels and tags.
pub fn build_sets(sample_index: &[usize], labels: &[usize], tags: &[ViewTag], mode: AnchorMode) -> ContrastiveSets {
    let m = labels.len();
    let mut sets = ContrastiveSets {
        positives: Vec::with_capacity(m),
        negatives: Vec::with_capacity(m),
        own_zooms: Vec::with_capacity(m),
        anchors: Vec::new(),
        singletons: Vec::new(),
    };
    for i in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..m).filter(|&j| labels[j] != labels[i]).collect();
        let zooms: Vec<usize> = (0..m)
            .filter(|&j| j != i && sample_index[j] == sample_index[i] && matches!(tags[j], ViewTag::Zoom(_)))
            .collect();
        let eligible = mode == AnchorMode::AllViews || tags[i] == ViewTag::Global;
        if eligible {
            if pos.is_empty() {
                sets.singletons.push(i);
            } else {
                sets.anchors.push(i);
            }
        }
        sets.positives.push(pos);
        sets.negatives.push(neg);
        sets.own_zooms.push(zooms);
    }
    sets
}

fn mask_tensor(rows: &[Vec<usize>], m: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; rows.len() * m];
    for (i, r) in rows.iter().enumerate() {
        for &j in r {
            v[i * m + j] = 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (rows.len(), m), dev)?.to_dtype(dtype)?)
}

fn vector_tensor(v: Vec<f64>, dtype: DType, dev: &Device) -> Result<Tensor> {
    let n = v.len();
    Ok(Tensor::from_vec(v, n, dev)?.to_dtype(dtype)?)
}

/// Summed over anchors: −mean over P′ of the log-softmax over P′ ∪ N′.
pub fn l_pp(batch: &EmbeddingBatch, sets: &ContrastiveSets, s_t: f64) -> Result<Tensor> {
    if sets.anchors.is_empty() {
        return Err(Error::NoValidAnchor);
    }
    let m = batch.len();
    let x = &batch.vectors;
    let (dtype, dev) = (x.dtype(), x.device());
    let idx = Tensor::from_vec(sets.anchors.iter().map(|&i| i as u32).collect::<Vec<_>>(), sets.anchors.len(), dev)?;
    let logits = (x.index_select(&idx, 0)?.matmul(&x.t()?)? * s_t)?;
    let pos_rows: Vec<Vec<usize>> = sets.anchors.iter().map(|&i| sets.positives[i].clone()).collect();
    let denom_rows: Vec<Vec<usize>> = sets
        .anchors
        .iter()
        .map(|&i| {
            let mut r = sets.positives[i].clone();
            r.extend(&sets.negatives[i]);
            r
        })
        .collect();
    let pos = mask_tensor(&pos_rows, m, dtype, dev)?;
    let denom = mask_tensor(&denom_rows, m, dtype, dev)?;
    // Shift by a detached row maximum over the denominator set.
    let row_max = (logits.detach() + ((&denom - 1.0)? * 1e30)?)?.max_keepdim(D::Minus1)?;
    let lse = ((logits.broadcast_sub(&row_max)?.exp()? * &denom)?
        .sum_keepdim(D::Minus1)?
        .log()?
        + &row_max)?
        .squeeze(D::Minus1)?;
    let inv_pos: Vec<f64> = pos_rows.iter().map(|p| 1.0 / p.len() as f64).collect();
    let pos_mean = ((&logits * &pos)?.sum(D::Minus1)? * vector_tensor(inv_pos, dtype, dev)?)?;
    Ok((lse - pos_mean)?.sum_all()?)
}

/// Independent supervised-contrastive loss over rows and labels, summed
/// over anchors with at least one positive.
pub fn supcon_reference(vectors: &Tensor, labels: &[usize], s_t: f64) -> Result<Tensor> {
    let (m, _) = vectors.dims2()?;
    let (dtype, dev) = (vectors.dtype(), vectors.device());
    let mut same = vec![0f64; m * m];
    let mut others = vec![1f64; m * m];
    let mut has_pos = vec![0f64; m];
    let mut counts = vec![1f64; m];
    for i in 0..m {
        others[i * m + i] = 0.0;
        let mut c = 0.0;
        for j in 0..m {
            if i != j && labels[i] == labels[j] {
                same[i * m + j] = 1.0;
                c += 1.0;
            }
        }
        if c > 0.0 {
            has_pos[i] = 1.0;
            counts[i] = c;
        }
    }
    if has_pos.iter().all(|h| *h == 0.0) {
        return Err(Error::NoValidAnchor);
    }
    let same = Tensor::from_vec(same, (m, m), dev)?.to_dtype(dtype)?;
    let others = Tensor::from_vec(others, (m, m), dev)?.to_dtype(dtype)?;
    let sim = (vectors.matmul(&vectors.t()?)? * s_t)?;
    // Cosines are bounded by one, so s_t is a safe constant shift.
    let log_den = ((sim.clone() - s_t)?.exp()? * &others)?.sum(D::Minus1)?.log()? + s_t;
    let log_prob = sim.broadcast_sub(&log_den?.unsqueeze(1)?)?;
    let mean_pos = ((log_prob * &same)?.sum(D::Minus1)? / vector_tensor(counts, dtype, dev)?)?;
    Ok((mean_pos * vector_tensor(has_pos, dtype, dev)?)?.sum_all()?.neg()?)
}

/// Returns the columns normalized over the batch axis and a 0/1 mask of
/// columns with a usable norm.
fn normalize_columns(c: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let sumsq = c.sqr()?.sum_keepdim(0)?;
    let host = sumsq.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mask: Vec<f64> = host.iter().map(|s| if s.sqrt() >= 1e-12 { 1.0 } else { 0.0 }).collect();
    let degenerate = mask.iter().filter(|m| **m == 0.0).count();
    if degenerate > 0 {
        log::warn!("decoupling loss: skipping {degenerate} degenerate dimension(s)");
    }
    let d = mask.len();
    let keep = Tensor::from_vec(mask.clone(), (1, d), c.device())?.to_dtype(c.dtype())?;
    // Skipped columns get a unit denominator so no gradient flows through sqrt(0).
    let norms = (sumsq.broadcast_mul(&keep)? + (1.0 - &keep)?)?.sqrt()?;
    Ok((c.broadcast_div(&norms)?.broadcast_mul(&keep)?, mask))
}

/// Decoupling loss between two aligned b×d views.
pub fn l_dc(c1: &Tensor, c2: &Tensor, balance_d: f64) -> Result<Tensor> {
    let (b, d) = c1.dims2()?;
    if c2.dims() != c1.dims() {
        return Err(Error::ShapeMismatch(format!("views {:?} and {:?} differ", c1.dims(), c2.dims())));
    }
    if b < 2 {
        return Err(Error::ShapeMismatch("decoupling loss needs a batch of at least 2".into()));
    }
    let (n1, m1) = normalize_columns(c1)?;
    let (n2, m2) = normalize_columns(c2)?;
    let corr = n1.t()?.matmul(&n2)?;
    let eye = Tensor::eye(d, c1.dtype(), c1.device())?;
    let diag_keep: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| a * b).collect();
    let diag_keep = vector_tensor(diag_keep, c1.dtype(), c1.device())?;
    let off = (corr.sqr()? * (1.0 - &eye)?)?.sum_all()?;
    let diag = ((corr * &eye)?.sum(D::Minus1)? - 1.0)?.sqr()?;
    let on = (diag * diag_keep)?.sum_all()?;
    Ok(((off * balance_d)? + on)?)
}

/// Mean of `l_dc` over all unordered pairs of zoom views.
pub fn l_dc_views(zooms: &[Tensor], balance_d: f64) -> Result<Option<Tensor>> {
    let mut terms = Vec::new();
    for i in 0..zooms.len() {
        for j in i + 1..zooms.len() {
            terms.push(l_dc(&zooms[i], &zooms[j], balance_d)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len() as f64;
    Ok(Some((Tensor::stack(&terms, 0)?.sum_all()? / n)?))
}

#[derive(Debug, Clone)]
pub struct HcdOutput {
    pub total: Tensor,
    pub l_pp: f64,
    pub l_dc: f64,
}

/// `l_pp + λ · l_dc` over the zoom views.
pub fn hcd(batch: &EmbeddingBatch, sets: &ContrastiveSets, zooms: &[Tensor], cfg: &LossConfig) -> Result<HcdOutput> {
    let pp = l_pp(batch, sets, cfg.s_t)?;
    let l_pp_value = pp.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    match l_dc_views(zooms, cfg.balance_d)? {
        Some(dc) if cfg.lambda != 0.0 => {
            let l_dc_value = dc.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            Ok(HcdOutput { total: (pp + (dc * cfg.lambda)?)?, l_pp: l_pp_value, l_dc: l_dc_value })
        }
        Some(dc) => {
            let l_dc_value = dc.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            Ok(HcdOutput { total: pp, l_pp: l_pp_value, l_dc: l_dc_value })
        }
        None => Ok(HcdOutput { total: pp, l_pp: l_pp_value, l_dc: 0.0 }),
    }
}

/// Row-wise L2 normalization; fails on near-zero rows.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let host = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(row) = host.iter().position(|n| *n < 1e-12) {
        return Err(Error::ZeroVector { row });
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Largest deviation of any row norm from one.
pub fn max_norm_deviation(x: &Tensor) -> Result<(usize, f64)> {
    let norms = x
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_vec1::<f64>()?;
    Ok(norms
        .iter()
        .enumerate()
        .map(|(i, n)| (i, (n - 1.0).abs()))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 || x.1.is_nan() { x } else { acc }))
}

/// Two-layer perceptron D → D → d with a ReLU, then L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(vb: VarBuilder, input_dim: usize, output_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(input_dim, input_dim, vb.pp("fc1"))?,
            fc2: candle_nn::linear(input_dim, output_dim, vb.pp("fc2"))?,
        })
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(features)?.relu()?;
        l2_normalize(&self.fc2.forward(&h)?)
    }
}
