//! Acceptance criteria 1–10. Every test prints one `criterion N: PASS|FAIL`
//! line. Criteria 6 and 7 need the full desk-scale ablation (hours of CPU)
//! and are ignored by default; run them with `--ignored`.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use cdnet::cli::cmd_ablate;
use cdnet::cmz::{center_rect, gen_bbox, multi_zoom, AttentionMap, CmzConfig, CropRect, Provenance};
use cdnet::config::{Arm, Config};
use cdnet::datasets::{render_sample, SyntheticSpec};
use cdnet::evaluation::{classification_metrics, confusion, crop_quality, db_score, macro_auc};
use cdnet::loss::{
    build_sets, hcd, l2_normalize, l_dc, l_pp, supcon_reference, AnchorMode, EmbeddingBatch, LossConfig, ProjectionHead,
};
use cdnet::nn::{Adam, AdamConfig};
use cdnet::rng::rng_for;
use cdnet::trainer::{load_dataset, train_head, train_representation};
use cdnet::wsll::mcsp;

/// Written to the raw stderr handle so the line survives test output capture.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} [{name}] {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn dev() -> Device {
    Device::Cpu
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &dev()).unwrap()
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// Largest entry-wise gap between analytic and central-difference
/// gradients, relative to the largest gradient entry of the instance.
fn gradient_error(vars: &[Var], f: &dyn Fn() -> Tensor) -> f64 {
    let grads = f().backward().unwrap();
    let h = 1e-6;
    let (mut gap, mut scale) = (0.0f64, 1e-12f64);
    for var in vars {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.dims().to_vec();
        for i in 0..base.len() {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &dev()).unwrap()).unwrap();
                value(&f())
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            gap = gap.max((numeric - analytic[i]).abs());
            scale = scale.max(numeric.abs()).max(analytic[i].abs());
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &dev()).unwrap()).unwrap();
    }
    gap / scale
}

/// At least two classes and at least one repeated label; needs `b ≥ 3`.
fn random_labels(rng: &mut impl Rng, b: usize) -> Vec<usize> {
    assert!(b >= 3);
    loop {
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        let repeated = (0..b).any(|i| (0..b).any(|j| i != j && labels[i] == labels[j]));
        if distinct >= 2 && repeated {
            return labels;
        }
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let mut rng = rng_for(&[1001]);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let instances = 20;

    let mut e = 0.0f64;
    for _ in 0..instances {
        let (b, d, zn) = (rng.gen_range(3..=8), rng.gen_range(2..=16), rng.gen_range(0..=2));
        let labels = random_labels(&mut rng, b);
        let views: Vec<Var> = (0..=zn).map(|_| Var::from_tensor(&randn(&mut rng, &[b, d])).unwrap()).collect();
        let f = || {
            let normed: Vec<Tensor> = views.iter().map(|v| l2_normalize(v.as_tensor()).unwrap()).collect();
            let batch = EmbeddingBatch::from_views(&normed, &labels).unwrap();
            let sets = build_sets(&batch.sample_index, &batch.labels, &batch.view_tags, AnchorMode::AllViews);
            l_pp(&batch, &sets, 10.0).unwrap()
        };
        e = e.max(gradient_error(&views, &f));
    }
    worst.push(("l_pp", e));

    let mut e = 0.0f64;
    for _ in 0..instances {
        let (b, d) = (rng.gen_range(2..=8), rng.gen_range(2..=16));
        let c1 = Var::from_tensor(&randn(&mut rng, &[b, d])).unwrap();
        let c2 = Var::from_tensor(&randn(&mut rng, &[b, d])).unwrap();
        let f = || l_dc(c1.as_tensor(), c2.as_tensor(), 0.05).unwrap();
        e = e.max(gradient_error(&[c1.clone(), c2.clone()], &f));
    }
    worst.push(("l_dc", e));

    let mut e = 0.0f64;
    for _ in 0..instances {
        let (b, d, zn) = (rng.gen_range(3..=8), rng.gen_range(2..=16), rng.gen_range(1..=2));
        let labels = random_labels(&mut rng, b);
        let views: Vec<Var> = (0..=zn).map(|_| Var::from_tensor(&randn(&mut rng, &[b, d])).unwrap()).collect();
        let cfg = LossConfig { lambda: rng.gen_range(0.01..1.0), ..Default::default() };
        let f = || {
            let normed: Vec<Tensor> = views.iter().map(|v| l2_normalize(v.as_tensor()).unwrap()).collect();
            let batch = EmbeddingBatch::from_views(&normed, &labels).unwrap();
            let sets = build_sets(&batch.sample_index, &batch.labels, &batch.view_tags, AnchorMode::AllViews);
            hcd(&batch, &sets, &normed[1..], &cfg).unwrap().total
        };
        e = e.max(gradient_error(&views, &f));
    }
    worst.push(("hcd", e));

    let mut e = 0.0f64;
    for _ in 0..instances {
        let (b, din, dout) = (rng.gen_range(1..=8), rng.gen_range(2..=16), rng.gen_range(2..=16));
        let vm = VarMap::new();
        let head = ProjectionHead::new(VarBuilder::from_varmap(&vm, DType::F64, &dev()), din, dout).unwrap();
        let mut vars: Vec<Var> = vm.all_vars();
        for v in &vars {
            v.set(&(randn(&mut rng, v.dims()) * 0.5).unwrap()).unwrap();
        }
        let x = Var::from_tensor(&randn(&mut rng, &[b, din])).unwrap();
        let w = randn(&mut rng, &[b, dout]);
        vars.push(x.clone());
        let f = || (head.project(x.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        e = e.max(gradient_error(&vars, &f));
    }
    worst.push(("project", e));

    let mut e = 0.0f64;
    for _ in 0..instances {
        let (b, c, a, s) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(2..=4));
        let feat = Var::from_tensor(&randn(&mut rng, &[b, c, s, s])).unwrap();
        let att_v: Vec<f64> = (0..b * a * s * s).map(|_| rng.gen_range(0.05..1.0)).collect();
        let att = Var::from_tensor(&Tensor::from_vec(att_v, (b, a, s, s), &dev()).unwrap()).unwrap();
        let w = randn(&mut rng, &[b, c]);
        let f = || (mcsp(feat.as_tensor(), att.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        e = e.max(gradient_error(&[feat.clone(), att.clone()], &f));
    }
    worst.push(("mcsp", e));

    let pass = worst.iter().all(|(_, e)| *e < 1e-4);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n}={e:.2e}")).collect();
    report(1, "gradient correctness", pass, &format!("{instances} instances each, max rel err {}", detail.join(" ")));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_l_pp_reduces_to_supcon() {
    let mut rng = rng_for(&[1002]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, d) = (rng.gen_range(3..=32), rng.gen_range(2..=32));
        let labels = random_labels(&mut rng, b);
        let x = l2_normalize(&randn(&mut rng, &[b, d])).unwrap();
        let batch = EmbeddingBatch::from_views(std::slice::from_ref(&x), &labels).unwrap();
        let sets = build_sets(&batch.sample_index, &batch.labels, &batch.view_tags, AnchorMode::AllViews);
        let s_t = rng.gen_range(1.0..20.0);
        let cfg = LossConfig { lambda: 0.0, s_t, ..Default::default() };
        let ours = value(&hcd(&batch, &sets, &[], &cfg).unwrap().total);
        let reference = value(&supcon_reference(&x, &labels, s_t).unwrap());
        worst = worst.max((ours - reference).abs());
    }
    let pass = worst < 1e-6;
    report(2, "SupCon reduction", pass, &format!("100 batches, max |diff| {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Cross-correlation of the two views after scaling every column to unit
/// length over the batch.
fn cross_correlation(c1: &[Vec<f64>], c2: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = c1[0].len();
    let norm = |c: &[Vec<f64>], j: usize| c.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| c1.iter().zip(c2).map(|(a, b)| a[i] * b[j]).sum::<f64>() / (norm(c1, i) * norm(c2, j)))
                .collect()
        })
        .collect()
}

#[test]
fn criterion_3_decoupling_drives_views_to_identity_correlation() {
    let mut rng = rng_for(&[1003]);
    let (b, d) = (32, 16);
    let c1 = Var::from_tensor(&randn(&mut rng, &[b, d])).unwrap();
    let c2 = Var::from_tensor(&randn(&mut rng, &[b, d])).unwrap();
    let cfg = AdamConfig { lr: 0.02, beta1: 0.9, weight_decay: 0.0, ..Default::default() };
    let mut adam = Adam::new(vec![("c1".into(), c1.clone()), ("c2".into(), c2.clone())], cfg);
    let (mut steps, mut off, mut diag) = (0, f64::MAX, 0.0);
    for step in 1..=500 {
        let loss = l_dc(c1.as_tensor(), c2.as_tensor(), 0.05).unwrap();
        adam.step(&loss.backward().unwrap()).unwrap();
        let corr = cross_correlation(&to_rows(c1.as_tensor()), &to_rows(c2.as_tensor()));
        off = (0..d).flat_map(|i| (0..d).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| corr[i][j].abs()).fold(0.0, f64::max);
        diag = (0..d).map(|i| corr[i][i]).fold(f64::MAX, f64::min);
        steps = step;
        if off < 0.05 && diag > 0.95 {
            break;
        }
    }
    let pass = off < 0.05 && diag > 0.95;
    report(3, "decoupling convergence", pass, &format!("{steps} steps, max off-diag |cos| {off:.4}, min diag cos {diag:.4}"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

fn confusion_oracle(y: &[usize], p: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for t in 0..k {
        for q in 0..k {
            m[t][q] = y.iter().zip(p).filter(|(a, b)| **a == t && **b == q).count() as u64;
        }
    }
    m
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn auc_pairs(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Davies-Bouldin with the spread written through pairwise distances:
/// mean squared distance to the centroid equals half the mean squared
/// pairwise distance.
fn db_oracle(x: &[Vec<f64>], y: &[usize], k: usize) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let members: Vec<Vec<&Vec<f64>>> = (0..k).map(|c| x.iter().zip(y).filter(|(_, l)| **l == c).map(|(r, _)| r).collect()).collect();
    let spread: Vec<f64> = members
        .iter()
        .map(|m| {
            let n = m.len() as f64;
            m.iter().flat_map(|a| m.iter().map(move |b| sq(a, b))).sum::<f64>() / (2.0 * n * n)
        })
        .collect();
    let cent: Vec<Vec<f64>> = members
        .iter()
        .map(|m| (0..x[0].len()).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64).collect())
        .collect();
    (0..k)
        .map(|i| (0..k).filter(|j| *j != i).map(|j| (spread[i] + spread[j]) / sq(&cent[i], &cent[j]).sqrt()).fold(f64::MIN, f64::max))
        .sum::<f64>()
        / k as f64
}

fn l_dc_oracle(c1: &[Vec<f64>], c2: &[Vec<f64>], bd: f64) -> f64 {
    let corr = cross_correlation(c1, c2);
    let d = corr.len();
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            loss += if i == j { (1.0 - corr[i][j]).powi(2) } else { bd * corr[i][j].powi(2) };
        }
    }
    loss
}

fn mcsp_oracle(f: &[f64], a: &[f64], (b, c, na, hw): (usize, usize, usize, usize)) -> Vec<Vec<f64>> {
    (0..b)
        .map(|n| {
            (0..c)
                .map(|ch| {
                    let mut acc = 0.0;
                    for k in 0..na {
                        let (mut num, mut den) = (0.0, 0.0);
                        for p in 0..hw {
                            let w = a[(n * na + k) * hw + p];
                            num += w * f[(n * c + ch) * hw + p];
                            den += w;
                        }
                        acc += num / den;
                    }
                    acc / na as f64
                })
                .collect()
        })
        .collect()
}

fn bbox_oracle(att: &AttentionMap, k: f64) -> (usize, usize, usize, usize) {
    let max = att.data.iter().cloned().fold(f64::MIN, f64::max);
    let mut cells = Vec::new();
    for y in 0..att.height {
        for x in 0..att.width {
            let v = att.get(y, x);
            if v >= k * max || v == max {
                cells.push((y, x));
            }
        }
    }
    let y0 = cells.iter().map(|c| c.0).min().unwrap();
    let y1 = cells.iter().map(|c| c.0).max().unwrap();
    let x0 = cells.iter().map(|c| c.1).min().unwrap();
    let x1 = cells.iter().map(|c| c.1).max().unwrap();
    (y0, y1, x0, x1)
}

#[test]
fn criterion_4_operations_match_brute_force_oracles() {
    let mut rng = rng_for(&[1004]);
    let n_inst = 100;
    let mut results: Vec<(&str, f64, f64)> = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let k = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=60);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let counts = confusion(&y, &p, k).unwrap();
        assert_eq!(counts.matrix, confusion_oracle(&y, &p, k));
        let m = classification_metrics(&counts);
        for c in 0..k {
            let tp = y.iter().zip(&p).filter(|(a, b)| **a == c && **b == c).count() as f64;
            let fp = y.iter().zip(&p).filter(|(a, b)| **a != c && **b == c).count() as f64;
            let fneg = y.iter().zip(&p).filter(|(a, b)| **a == c && **b != c).count() as f64;
            let tn = n as f64 - tp - fp - fneg;
            let pre = safe_div(tp, tp + fp);
            let sen = safe_div(tp, tp + fneg);
            let expect = [safe_div(2.0 * pre * sen, pre + sen), (tp + tn) / n as f64, pre, sen, safe_div(tn, tn + fp)];
            let got = [m.per_class[c].f1, m.per_class[c].acc, m.per_class[c].pre, m.per_class[c].sen, m.per_class[c].spe];
            for (a, b) in expect.iter().zip(got) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    results.push(("confusion+metrics", worst, 1e-12));

    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let k = 3;
        let y: Vec<usize> = (0..200).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        let probs: Vec<Vec<f64>> = (0..200).map(|_| (0..k).map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0).collect()).collect();
        let oracle = (0..k)
            .map(|c| {
                let s: Vec<f64> = probs.iter().map(|r| r[c]).collect();
                let pos: Vec<bool> = y.iter().map(|l| *l == c).collect();
                auc_pairs(&s, &pos)
            })
            .sum::<f64>()
            / k as f64;
        worst = worst.max((macro_auc(&y, &probs).unwrap() - oracle).abs());
    }
    results.push(("auc", worst, 1e-10));

    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let (k, d) = (rng.gen_range(2..=5), rng.gen_range(1..=8));
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let y: Vec<usize> = (0..rng.gen_range(2 * k..60)).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        let x: Vec<Vec<f64>> = y.iter().map(|&c| centers[c].iter().map(|m| m + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()).collect();
        worst = worst.max((db_score(&x, &y).unwrap() - db_oracle(&x, &y, k)).abs());
    }
    results.push(("db_score", worst, 1e-9));

    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let (b, d) = (rng.gen_range(2..=16), rng.gen_range(1..=16));
        let (c1, c2) = (randn(&mut rng, &[b, d]), randn(&mut rng, &[b, d]));
        let bd = rng.gen_range(0.0..1.0);
        let ours = value(&l_dc(&c1, &c2, bd).unwrap());
        worst = worst.max((ours - l_dc_oracle(&to_rows(&c1), &to_rows(&c2), bd)).abs() / ours.abs().max(1.0));
    }
    results.push(("l_dc", worst, 1e-9));

    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let (b, c, na, s) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=7));
        let f: Vec<f64> = (0..b * c * s * s).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: Vec<f64> = (0..b * na * s * s).map(|_| rng.gen_range(0.01..1.0)).collect();
        let ft = Tensor::from_vec(f.clone(), (b, c, s, s), &dev()).unwrap();
        let at = Tensor::from_vec(a.clone(), (b, na, s, s), &dev()).unwrap();
        let ours = to_rows(&mcsp(&ft, &at).unwrap());
        let oracle = mcsp_oracle(&f, &a, (b, c, na, s * s));
        for (r, o) in ours.iter().zip(&oracle) {
            for (u, v) in r.iter().zip(o) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    results.push(("mcsp", worst, 1e-9));

    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let (h, w) = (rng.gen_range(1..=14), rng.gen_range(1..=14));
        let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
        let att = AttentionMap::new(h, w, data);
        let k = rng.gen_range(0.1..0.95);
        let (y0, y1, x0, x1) = bbox_oracle(&att, k);
        let expect = CropRect::new(x0 as f64 / w as f64, y0 as f64 / h as f64, (y1 - y0 + 1) as f64 / h as f64, (x1 - x0 + 1) as f64 / w as f64, Provenance::Full);
        let got = gen_bbox(&att, k);
        worst = worst.max((got.x - expect.x).abs()).max((got.y - expect.y).abs()).max((got.h - expect.h).abs()).max((got.w - expect.w).abs());
    }
    results.push(("gen_bbox", worst, 1e-12));

    let pass = results.iter().all(|(_, e, tol)| e <= tol);
    let detail: Vec<String> = results.iter().map(|(n, e, tol)| format!("{n}={e:.1e}(tol {tol:.0e})")).collect();
    report(4, "oracle equivalence", pass, &format!("{n_inst} instances each: {}", detail.join(" ")));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

/// Attention planted on the lesion mask: per-cell lesion fraction plus a
/// weak noise floor.
fn planted_attention(mask: &cdnet::image::ImageBuf, cells: usize, rng: &mut impl Rng) -> AttentionMap {
    let (h, w) = (mask.height, mask.width);
    let mut data = vec![0.0; cells * cells];
    for y in 0..h {
        for x in 0..w {
            data[(y * cells / h) * cells + x * cells / w] += mask.get(y, x, 0) as f64;
        }
    }
    let per_cell = (h * w) as f64 / (cells * cells) as f64;
    for v in data.iter_mut() {
        *v = *v / per_cell + 0.05 * rng.gen::<f64>();
    }
    AttentionMap::new(cells, cells, data)
}

#[test]
fn criterion_5_contrastive_zooms_overlap_less_than_center_crops() {
    let spec = SyntheticSpec { n_per_class: 250, image_size: 96, ..Default::default() };
    let cfg = CmzConfig { zoom_count: 2, alpha: 0.5, ..Default::default() };
    let (mut cmz, mut center_pairs, mut center_single, mut masks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in 1..spec.n_classes {
        for i in 0..spec.n_per_class {
            let (img, mask, _) = render_sample(&spec, class, i);
            let mut rng = rng_for(&[1005, class as u64, i as u64]);
            let att = planted_attention(&mask, 7, &mut rng);
            let zooms = multi_zoom(&img, &att, &cfg, &mut rng);
            let (cx, cy) = center_rect(&att, &cfg).center();
            let centered: Vec<CropRect> = zooms.iter().map(|z| CropRect::around(cx, cy, z.rect.h, z.rect.w, Provenance::Center)).collect();
            cmz.push(zooms.iter().map(|z| z.rect).collect::<Vec<_>>());
            center_single.push(vec![centered[0]]);
            center_pairs.push(centered);
            masks.push(Some(mask));
        }
    }
    let n = cmz.len();
    let q_cmz = crop_quality(&cmz, &masks).unwrap();
    let q_center = crop_quality(&center_pairs, &masks).unwrap();
    let q_one = crop_quality(&center_single, &masks).unwrap();
    let (iou_cmz, iou_center) = (q_cmz.mean_pairwise_iou.unwrap(), q_center.mean_pairwise_iou.unwrap());
    let reduction = 1.0 - iou_cmz / iou_center;
    let pass = reduction >= 0.10 && q_cmz.lesion_recall >= q_one.lesion_recall;
    report(
        5,
        "CMZ overlap reduction",
        pass,
        &format!(
            "{n} samples: IoU cmz {iou_cmz:.4} vs center {iou_center:.4} ({:.1}% lower); recall union {:.4} vs one center crop {:.4}",
            100.0 * reduction,
            q_cmz.lesion_recall,
            q_one.lesion_recall
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criteria 6 and 7

fn desk_config() -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    Config::load(Some(&path), &[]).unwrap()
}

fn ablation_direction(cfg: &Config, label: &str) {
    let dir = tempfile::tempdir().unwrap();
    let table = cmd_ablate(cfg, dir.path(), 1).unwrap();
    let f1 = |arm: Arm| table.rows.iter().find(|r| r.arm == arm.name()).and_then(|r| r.f1.clone()).unwrap().mean;
    let (full, cmz, base) = (f1(Arm::Cdnet), f1(Arm::WsllCmz), f1(Arm::CeBaseline));
    let pass6 = full > cmz && cmz > base && full >= base + 0.02;
    report(
        6,
        "ablation direction",
        pass6,
        &format!("{label}: macro-F1 cdnet {:.2} / wsll_cmz {:.2} / ce_baseline {:.2}", 100.0 * full, 100.0 * cmz, 100.0 * base),
    );
    let db = |arm: Arm, seed: u64| {
        table.runs.iter().find(|r| r.arm == arm.name() && r.seed == seed).and_then(|r| r.report.db_score).unwrap()
    };
    let wins = cfg.ablate.seeds.iter().filter(|&&s| db(Arm::Cdnet, s) < db(Arm::CeBaseline, s)).count();
    let pass7 = wins >= 2;
    report(7, "DB-score direction", pass7, &format!("{label}: cdnet below baseline on {wins} of {} seeds", cfg.ablate.seeds.len()));
    assert!(pass6 && pass7);
}

#[test]
#[ignore = "full desk-scale ablation: 5000 images, 60+20 epochs, 3 arms x 3 seeds (about a day on one CPU core)"]
fn criteria_6_and_7_desk_scale_ablation() {
    let mut cfg = desk_config();
    cfg.ablate.arms = vec![Arm::CeBaseline, Arm::WsllCmz, Arm::Cdnet];
    cfg.train.export_embeddings = false;
    ablation_direction(&cfg, "desk scale");
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_projections_stay_on_the_unit_sphere() {
    let mut cfg = desk_config();
    cfg.synth.n_per_class = 60;
    cfg.synth.image_size = 64;
    cfg.backbone.input_size = 64;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 32;
    cfg.train.export_embeddings = false;
    cfg.train.check_invariants = true;
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_representation(&cfg, &data, dir.path());
    let (pass, detail) = match &out {
        Ok(o) => (o.max_norm_deviation < 1e-6, format!("{} steps, max | ||z|| - 1 | = {:.2e}", o.steps, o.max_norm_deviation)),
        Err(e) => (false, e.to_string()),
    };
    report(8, "hypersphere invariant", pass, &format!("one epoch over {} images: {detail}", data.train.len()));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

fn run_twice_bytes(cfg: &Config) -> Vec<(String, Vec<u8>)> {
    let data = load_dataset(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let repr = train_representation(cfg, &data, dir.path()).unwrap();
    train_head(cfg, &data, &repr.checkpoint, dir.path()).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = walk(dir.path())
        .into_iter()
        .map(|p| (p.strip_prefix(dir.path()).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn criterion_9_repeat_runs_are_bit_identical() {
    let mut cfg = desk_config();
    cfg.synth.n_per_class = 10;
    cfg.train.epochs = 2;
    cfg.train.head_epochs = 2;
    cfg.train.seed = 7;
    cfg.train.batch_size = 16;
    let a = run_twice_bytes(&cfg);
    let b = run_twice_bytes(&cfg);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let same = a == b;
    let has = |n: &str| names.contains(&n);
    let pass = same && has("repr.ckpt") && has("head.ckpt") && has("repr_metrics.jsonl") && has("head_metrics.jsonl");
    report(9, "determinism", pass, &format!("{} files compared byte for byte: {}", a.len(), names.join(", ")));
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_lambda_sweep_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_cdnet"))
        .args(["ablate", "--config"])
        .arg(&config)
        .args(["--override", "ablate.arms=[]", "--override", "ablate.lambdas=[0.02, 0.1, 0.4]", "--override", "ablate.seeds=[0, 1]"])
        .arg("--out")
        .arg(dir.path())
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap_or_default()).unwrap_or_default();
    let md = std::fs::read_to_string(dir.path().join("ablation.md")).unwrap_or_default();
    let rows = json["rows"].as_array().cloned().unwrap_or_default();
    let arms: Vec<&str> = rows.iter().filter_map(|r| r["arm"].as_str()).collect();
    let populated = rows.iter().all(|r| r["f1"]["std"].is_f64() && r["f1"]["n"] == 2);
    let pass = status.success()
        && arms == ["cdnet_lambda_0.02", "cdnet_lambda_0.1", "cdnet_lambda_0.4"]
        && populated
        && md.matches('±').count() >= 3;
    report(10, "lambda sweep", pass, &format!("exit {:?}, rows {arms:?}, mean±std populated: {populated}", status.code()));
    assert!(pass);
}
