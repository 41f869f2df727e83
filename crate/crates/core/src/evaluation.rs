//! Classification metrics, rank AUC, Davies-Bouldin score, crop quality
//! and export helpers for reports, embeddings and attention overlays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmz::{AttentionMap, CropRect};
use crate::error::{Error, Result};
use crate::image::ImageBuf;

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub matrix: Vec<Vec<u64>>,
}

impl ConfusionCounts {
    pub fn classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.matrix[c][c]
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.matrix[c].iter().sum::<u64>() - self.tp(c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        self.matrix.iter().map(|r| r[c]).sum::<u64>() - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fn_(c) - self.fp(c)
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let k = self.classes();
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut s = String::from("true\\pred");
        for c in 0..k {
            s.push(',');
            s.push_str(&name(c));
        }
        s.push('\n');
        for (r, row) in self.matrix.iter().enumerate() {
            s.push_str(&name(r));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize], k: usize) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut matrix = vec![vec![0u64; k]; k];
    for (&y, &p) in labels.iter().zip(predictions) {
        for v in [y, p] {
            if v >= k {
                return Err(Error::LabelOutOfRange { label: v, classes: k });
            }
        }
        matrix[y][p] += 1;
    }
    Ok(ConfusionCounts { matrix })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub f1: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: ClassMetrics,
    pub auc: Option<f64>,
    pub db_score: Option<f64>,
    pub confusion: ConfusionCounts,
    pub n_samples: u64,
}

fn ratio(num: u64, den: u64, what: &str, class: usize) -> f64 {
    if den == 0 {
        log::warn!("{what} of class {class} is 0/0; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest rates per class and their unweighted means.
pub fn classification_metrics(counts: &ConfusionCounts) -> MetricsReport {
    let k = counts.classes();
    let total = counts.total();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let (tp, tn, fp, fn_) = (counts.tp(c), counts.tn(c), counts.fp(c), counts.fn_(c));
            ClassMetrics {
                f1: ratio(2 * tp, 2 * tp + fp + fn_, "F1", c),
                acc: ratio(tp + tn, total, "accuracy", c),
                pre: ratio(tp, tp + fp, "precision", c),
                sen: ratio(tp, tp + fn_, "sensitivity", c),
                spe: ratio(tn, tn + fp, "specificity", c),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    let macro_avg = ClassMetrics {
        f1: mean(|m| m.f1),
        acc: mean(|m| m.acc),
        pre: mean(|m| m.pre),
        sen: mean(|m| m.sen),
        spe: mean(|m| m.spe),
    };
    MetricsReport {
        per_class,
        macro_avg,
        auc: None,
        db_score: None,
        confusion: counts.clone(),
        n_samples: total,
    }
}

/// Mann-Whitney AUC with mid-ranks for ties. `None` when one side is empty.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = (0..scores.len()).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class, macro-averaged over classes present in
/// `labels`.
pub fn macro_auc(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(Error::ShapeMismatch(format!("{} labels vs {} rows", labels.len(), probs.len())));
    }
    let k = probs.first().map_or(0, |r| r.len());
    let mut aucs = Vec::new();
    for c in 0..k {
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match rank_auc(&scores, &pos) {
            Some(a) => aucs.push(a),
            None if pos.iter().any(|p| *p) => return Err(Error::DegenerateLabels),
            None => log::warn!("class {c} absent from labels; skipped in AUC"),
        }
    }
    if aucs.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Davies-Bouldin score on the given vectors: spread is the mean squared
/// distance to the class centroid, separation the centroid distance, and
/// the score the mean over classes of the worst pairwise ratio.
pub fn db_score(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} rows vs {} labels", embeddings.len(), labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let d = embeddings[0].len();
    let mut centroids = Vec::new();
    let mut spread = Vec::new();
    for &c in &classes {
        let members: Vec<&Vec<f64>> = embeddings.iter().zip(labels).filter(|(_, y)| **y == c).map(|(e, _)| e).collect();
        let n = members.len() as f64;
        let mut cen = vec![0.0; d];
        for m in &members {
            for (a, v) in cen.iter_mut().zip(m.iter()) {
                *a += v / n;
            }
        }
        spread.push(members.iter().map(|m| sq_dist(m, &cen)).sum::<f64>() / n);
        centroids.push(cen);
    }
    let k = classes.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = sq_dist(&centroids[i], &centroids[j]).sqrt();
            if sep == 0.0 {
                return Err(Error::CoincidentCentroids(classes[i], classes[j]));
            }
            worst = worst.max((spread[i] + spread[j]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// `db_score` after L2-normalizing every row.
pub fn db_score_normalized(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let normed: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(row, e)| {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                Err(Error::ZeroVector { row })
            } else {
                Ok(e.iter().map(|v| v / n).collect())
            }
        })
        .collect::<Result<_>>()?;
    db_score(&normed, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropQuality {
    /// Lesion pixels covered by at least one crop, pooled over images.
    pub lesion_recall: f64,
    /// Mean IoU over all same-image crop pairs; `None` with fewer than two
    /// crops per image.
    pub mean_pairwise_iou: Option<f64>,
}

pub fn crop_quality(crops: &[Vec<CropRect>], masks: &[Option<ImageBuf>]) -> Result<CropQuality> {
    if crops.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} crop lists vs {} masks", crops.len(), masks.len())));
    }
    let (mut covered, mut lesion) = (0u64, 0u64);
    let (mut iou_sum, mut pairs) = (0.0, 0u64);
    for (i, (rects, mask)) in crops.iter().zip(masks).enumerate() {
        let mask = mask.as_ref().ok_or(Error::NoMask(i))?;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x, 0) > 0.5 {
                    lesion += 1;
                    let px = (x as f64 + 0.5) / mask.width as f64;
                    let py = (y as f64 + 0.5) / mask.height as f64;
                    if rects.iter().any(|r| r.contains(px, py)) {
                        covered += 1;
                    }
                }
            }
        }
        for a in 0..rects.len() {
            for b in a + 1..rects.len() {
                iou_sum += rects[a].iou(&rects[b]);
                pairs += 1;
            }
        }
    }
    Ok(CropQuality {
        lesion_recall: if lesion == 0 { 1.0 } else { covered as f64 / lesion as f64 },
        mean_pairwise_iou: (pairs > 0).then(|| iou_sum / pairs as f64),
    })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_attention(att: &AttentionMap) -> AttentionMap {
    let lo = att.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = att.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = att
        .data
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    AttentionMap::new(att.height, att.width, data)
}

fn attention_image(att: &AttentionMap) -> ImageBuf {
    let n = normalize_attention(att);
    ImageBuf::from_fn(n.height, n.width, 1, |y, x, _| n.get(y, x) as f32)
}

/// 8-bit grayscale export of a min-max normalized map.
pub fn save_attention_png(att: &AttentionMap, path: &Path) -> Result<()> {
    attention_image(att).save_png(path)
}

/// Upsamples the normalized map to the image size and alpha-blends a
/// black-red-yellow-white ramp over the RGB image.
pub fn heatmap_overlay(image: &ImageBuf, att: &AttentionMap, alpha: f32) -> ImageBuf {
    let heat = attention_image(att).resize_bilinear(image.height, image.width);
    let rgb = image.to_rgb();
    ImageBuf::from_fn(image.height, image.width, 3, |y, x, c| {
        let h = heat.get(y, x, 0);
        let color = (3.0 * h - c as f32).clamp(0.0, 1.0);
        (1.0 - alpha) * rgb.get(y, x, c) + alpha * color
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Global,
    Local,
}

/// Writes `<id>_<branch>.png` overlays; returns the written paths.
pub fn heatmap_export(
    items: &[(String, Branch, ImageBuf, AttentionMap)],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (id, branch, image, att) in items {
        let tag = match branch {
            Branch::Global => "global",
            Branch::Local => "local",
        };
        let safe_id = id.replace(['/', '\\'], "_");
        let path = out_dir.join(format!("{safe_id}_{tag}.png"));
        heatmap_overlay(image, att, 0.5).save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub n: usize,
    pub d: usize,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub dtype: String,
}

/// Row-major little-endian f32 array plus a JSON sidecar at `<path>.json`.
pub fn export_embeddings(path: &Path, rows: &[Vec<f64>], labels: &[usize], ids: &[String]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) || labels.len() != rows.len() {
        return Err(Error::ShapeMismatch("ragged embedding export".into()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(rows.len() * d * 4);
    for r in rows {
        for v in r {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = EmbeddingSidecar {
        n: rows.len(),
        d,
        labels: labels.to_vec(),
        ids: ids.to_vec(),
        dtype: "f32le".into(),
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side_path, e))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<Vec<f64>>, EmbeddingSidecar)> {
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: EmbeddingSidecar = serde_json::from_str(&text)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.n * side.d * 4 {
        return Err(Error::ShapeMismatch(format!("{} bytes for {}×{} f32", bytes.len(), side.n, side.d)));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((vals.chunks(side.d.max(1)).map(|c| c.to_vec()).take(side.n).collect(), side))
}

/// `<stem>.json` with the full report and `<stem>_confusion.csv`.
pub fn write_report(report: &MetricsReport, class_names: &[String], dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let csv = dir.join(format!("{stem}_confusion.csv"));
    std::fs::write(&csv, report.confusion.to_csv(class_names)).map_err(|e| Error::io(&csv, e))
}

/// Human-readable macro table.
pub fn format_report(report: &MetricsReport) -> String {
    let m = &report.macro_avg;
    format!(
        "n={}  F1={:.4}  Acc={:.4}  Pre={:.4}  Sen={:.4}  Spe={:.4}  AUC={}  DB={}",
        report.n_samples,
        m.f1,
        m.acc,
        m.pre,
        m.sen,
        m.spe,
        report.auc.map_or("-".into(), |a| format!("{a:.4}")),
        report.db_score.map_or("-".into(), |d| format!("{d:.4}")),
    )
}
