//! Evaluation metrics: Image/Pixel AUROC, pixel AP, PRO, mIoU and NoC@k,
//! plus the results tables printed by the evaluation commands.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::connected_components;

/// Default false-positive-rate limit for PRO integration.
pub const DEFAULT_PRO_FPR_LIMIT: f64 = 0.3;

/// Indices of `scores` sorted by descending score.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve as the normalised Mann-Whitney U statistic.
/// Tied scores contribute one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "auroc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks, accumulated for positives only
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision: sum over descending unique thresholds of
/// `(R_k - R_{k-1}) * P_k`. Equal scores form a single threshold step.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "average_precision",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let order = descending_order(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Per-region overlap integrated up to `fpr_limit` and normalised by it.
///
/// For each threshold `t` (every distinct score, pixels with `score >= t`
/// flagged) the curve point is (FPR over normal pixels, mean over ground-truth
/// 8-connected regions of the flagged fraction). The curve is integrated as a
/// step function: on `[FPR_k, FPR_{k+1})` it takes the value `PRO_k`, starting
/// from the empty detection at (0, 0).
///
/// Regions and normal pixels are pooled across every (map, mask) pair.
pub fn pro_pooled(pairs: &[(ArrayView2<f32>, ArrayView2<bool>)], fpr_limit: f64) -> Result<f64> {
    Ok(pro_curve_integral(pairs, fpr_limit)? / fpr_limit)
}

pub fn pro(score_map: ArrayView2<f32>, gt_mask: ArrayView2<bool>, fpr_limit: f64) -> Result<f64> {
    pro_pooled(&[(score_map, gt_mask)], fpr_limit)
}

/// Unnormalised PRO integral over `[0, fpr_limit]`.
pub fn pro_curve_integral(pairs: &[(ArrayView2<f32>, ArrayView2<bool>)], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    // (score, region id or u32::MAX for normal pixels)
    let mut pixels: Vec<(f32, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut n_normal = 0usize;
    for (map, gt) in pairs {
        if map.dim() != gt.dim() {
            return Err(Error::ShapeMismatch {
                what: "pro",
                lhs: map.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let cc = connected_components(gt.view());
        let offset = region_sizes.len() as u32;
        region_sizes.extend_from_slice(&cc.sizes);
        for (&s, &label) in map.iter().zip(cc.labels.iter()) {
            if label == 0 {
                n_normal += 1;
                pixels.push((s, u32::MAX));
            } else {
                pixels.push((s, offset + label - 1));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::NoRegion);
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Fully covered regions are counted exactly so perfect overlap is 1.
    let n_regions = region_sizes.len() as f64;
    let mut hits = vec![0usize; region_sizes.len()];
    let mut full = 0usize;
    let mut partial = 0usize;
    let mut partial_sum = 0.0f64;
    let mut fp = 0usize;
    let mut prev_fpr = 0.0f64;
    let mut prev_pro = 0.0f64;
    let mut area = 0.0f64;
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                u32::MAX => fp += 1,
                r => {
                    let r = r as usize;
                    let size = region_sizes[r];
                    let old = hits[r];
                    hits[r] += 1;
                    if old > 0 {
                        partial_sum -= old as f64 / size as f64;
                        partial -= 1;
                    }
                    if hits[r] == size {
                        full += 1;
                    } else {
                        partial_sum += hits[r] as f64 / size as f64;
                        partial += 1;
                    }
                    if partial == 0 {
                        partial_sum = 0.0;
                    }
                }
            }
            i += 1;
        }
        let fpr = if n_normal == 0 { 0.0 } else { fp as f64 / n_normal as f64 };
        if fpr > fpr_limit {
            area += (fpr_limit - prev_fpr) * prev_pro;
            return Ok(area);
        }
        area += (fpr - prev_fpr) * prev_pro;
        prev_fpr = fpr;
        prev_pro = (full as f64 + partial_sum) / n_regions;
    }
    area += (fpr_limit - prev_fpr) * prev_pro;
    Ok(area)
}

/// Intersection over union of two binary masks; an empty union counts as 1.
pub fn iou(prediction: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    if prediction.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            what: "iou",
            lhs: prediction.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in prediction.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(pairs: &[(ArrayView2<bool>, ArrayView2<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("miou over zero samples".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += iou(p.view(), g.view())?;
    }
    Ok(total / pairs.len() as f64)
}

/// Number of clicks needed to reach `target`: the 1-based index of the first
/// trace entry with `iou >= target`, or `cap` if it never gets there.
pub fn noc(trace: &[f64], target: f64, cap: usize) -> usize {
    trace
        .iter()
        .take(cap)
        .position(|&v| v >= target)
        .map(|i| i + 1)
        .unwrap_or(cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NocSummary {
    pub mean_noc: f64,
    pub fraction_failed: f64,
}

pub fn aggregate_noc(traces: &[Vec<f64>], target: f64, cap: usize) -> Result<NocSummary> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let mut total = 0usize;
    let mut failed = 0usize;
    for t in traces {
        let reached = t.iter().take(cap).any(|&v| v >= target);
        if !reached {
            failed += 1;
        }
        total += noc(t, target, cap);
    }
    Ok(NocSummary {
        mean_noc: total as f64 / traces.len() as f64,
        fraction_failed: failed as f64 / traces.len() as f64,
    })
}

/// One evaluated sample for the anomaly detection tables.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub score_map: Array2<f32>,
    pub gt_mask: Array2<bool>,
    pub image_label: bool,
    pub image_score: f64,
    pub iou_trace: Vec<f64>,
}

/// AP / PRO / P-AUROC / I-AUROC over one category, pixels pooled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdScores {
    pub ap: f64,
    pub pro: f64,
    pub pixel_auroc: f64,
    pub image_auroc: f64,
}

/// AP / PRO / P-AUROC / mIoU at a fixed click budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IisScores {
    pub ap: f64,
    pub pro: f64,
    pub pixel_auroc: f64,
    pub miou: f64,
}

fn pooled_pixels(records: &[&EvalRecord]) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        scores.extend(r.score_map.iter().map(|&v| v as f64));
        labels.extend(r.gt_mask.iter().copied());
    }
    (scores, labels)
}

pub fn ad_scores(records: &[EvalRecord], fpr_limit: f64) -> Result<AdScores> {
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let (scores, labels) = pooled_pixels(&refs);
    let pairs: Vec<_> = records
        .iter()
        .map(|r| (r.score_map.view(), r.gt_mask.view()))
        .collect();
    let image_scores: Vec<f64> = records.iter().map(|r| r.image_score).collect();
    let image_labels: Vec<bool> = records.iter().map(|r| r.image_label).collect();
    Ok(AdScores {
        ap: average_precision(&scores, &labels)?,
        pro: pro_pooled(&pairs, fpr_limit)?,
        pixel_auroc: auroc(&scores, &labels)?,
        image_auroc: auroc(&image_scores, &image_labels)?,
    })
}

/// Scores a set of binarised predictions against ground truth. `score_maps`
/// carry the continuous model output used for AP/PRO/AUROC.
pub fn iis_scores(
    score_maps: &[Array2<f32>],
    gts: &[Array2<bool>],
    threshold: f32,
    fpr_limit: f64,
) -> Result<IisScores> {
    let records: Vec<EvalRecord> = score_maps
        .iter()
        .zip(gts)
        .map(|(s, g)| EvalRecord {
            score_map: s.clone(),
            gt_mask: g.clone(),
            image_label: true,
            image_score: 0.0,
            iou_trace: Vec::new(),
        })
        .collect();
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let (scores, labels) = pooled_pixels(&refs);
    let pairs: Vec<_> = records
        .iter()
        .map(|r| (r.score_map.view(), r.gt_mask.view()))
        .collect();
    let binarised: Vec<Array2<bool>> = score_maps.iter().map(|s| s.map(|&v| v >= threshold)).collect();
    let iou_pairs: Vec<_> = binarised.iter().zip(gts).map(|(p, g)| (p.view(), g.view())).collect();
    Ok(IisScores {
        ap: average_precision(&scores, &labels)?,
        pro: pro_pooled(&pairs, fpr_limit)?,
        pixel_auroc: auroc(&scores, &labels)?,
        miou: miou(&iou_pairs)?,
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

impl IisScores {
    /// `AP/PRO/P-AUROC/mIoU` as percentages with one decimal.
    pub fn quad(&self) -> String {
        format!("{}/{}/{}/{}", pct(self.ap), pct(self.pro), pct(self.pixel_auroc), pct(self.miou))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IisRow {
    pub name: String,
    /// (click budget, scores) in ascending budget order.
    pub per_budget: Vec<(usize, IisScores)>,
    pub noc: NocSummary,
    pub noc_target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdRow {
    pub name: String,
    pub scores: AdScores,
}

/// Interactive-segmentation table: one `AP/PRO/P-AUROC/mIoU` column per
/// click budget followed by NoC.
pub fn format_iis_table(rows: &[IisRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let target = (first.noc_target * 100.0).round() as u32;
    let mut header = vec!["Category".to_string()];
    header.extend(first.per_budget.iter().map(|(k, _)| format!("{k}-click")));
    header.push(format!("NoC{target}"));
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    let _ = writeln!(
        out,
        "| metric | {} | clicks |",
        vec!["AP/PRO/P-AUROC/mIoU"; first.per_budget.len()].join(" | ")
    );
    for row in rows {
        let mut cells = vec![row.name.clone()];
        cells.extend(row.per_budget.iter().map(|(_, s)| s.quad()));
        cells.push(format!("{:.1}", row.noc.mean_noc));
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

/// Anomaly-detection table with columns AP / PRO / P-AUROC / I-AUROC.
pub fn format_ad_table(rows: &[AdRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Category | AP | PRO | P-AUROC | I-AUROC |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for row in rows {
        let s = &row.scores;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            row.name,
            pct(s.ap),
            pct(s.pro),
            pct(s.pixel_auroc),
            pct(s.image_auroc)
        );
    }
    out
}

/// Arithmetic mean of per-category rows.
pub fn mean_ad_row(rows: &[AdRow]) -> Option<AdRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = |f: fn(&AdScores) -> f64| rows.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
    Some(AdRow {
        name: "mean".into(),
        scores: AdScores {
            ap: sum(|s| s.ap),
            pro: sum(|s| s.pro),
            pixel_auroc: sum(|s| s.pixel_auroc),
            image_auroc: sum(|s| s.image_auroc),
        },
    })
}

pub fn mean_iis_row(rows: &[IisRow]) -> Option<IisRow> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let per_budget = (0..first.per_budget.len())
        .map(|b| {
            let k = first.per_budget[b].0;
            let avg = |f: fn(&IisScores) -> f64| rows.iter().map(|r| f(&r.per_budget[b].1)).sum::<f64>() / n;
            (
                k,
                IisScores {
                    ap: avg(|s| s.ap),
                    pro: avg(|s| s.pro),
                    pixel_auroc: avg(|s| s.pixel_auroc),
                    miou: avg(|s| s.miou),
                },
            )
        })
        .collect();
    Some(IisRow {
        name: "mean".into(),
        per_budget,
        noc: NocSummary {
            mean_noc: rows.iter().map(|r| r.noc.mean_noc).sum::<f64>() / n,
            fraction_failed: rows.iter().map(|r| r.noc.fraction_failed).sum::<f64>() / n,
        },
        noc_target: first.noc_target,
    })
}
