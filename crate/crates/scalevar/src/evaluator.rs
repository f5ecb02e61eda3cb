//! Detection evaluation: greedy IoU matching, PR/AP with difficulty buckets,
//! recall-at-false-positive curves, and the box-to-ellipse linear regressor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use crate::geometry::iou;

use crate::detector::DetectionRecord;
use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::synthdata::AnnotationRecord;

/// Named height filter for one difficulty setting; `max_h = None` means
/// unbounded above, so a "hard" bucket is simply `[scale_lo, None)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketDef {
    pub name: String,
    pub min_h: f64,
    pub max_h: Option<f64>,
}

impl BucketDef {
    pub fn new(name: &str, min_h: f64, max_h: Option<f64>) -> Self {
        BucketDef { name: name.into(), min_h, max_h }
    }

    pub fn contains(&self, height: f64) -> bool {
        height >= self.min_h && self.max_h.map_or(true, |m| height < m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    AllPoints,
    ElevenPoint,
}

/// Evaluation protocol: match threshold, AP interpolation, and buckets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub buckets: Vec<BucketDef>,
    /// Cumulative false-positive counts for the recall curve.
    pub recall_fp_counts: Vec<usize>,
}

impl EvalProtocol {
    /// Desk-scale default: small/medium/large buckets over heights 6..96 plus
    /// a hard bucket covering everything at or above the minimum height.
    pub fn desk() -> Self {
        EvalProtocol {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoints,
            buckets: vec![
                BucketDef::new("small", 6.0, Some(16.0)),
                BucketDef::new("medium", 16.0, Some(48.0)),
                BucketDef::new("large", 48.0, None),
                BucketDef::new("hard", 6.0, None),
            ],
            recall_fp_counts: vec![10, 50, 100, 200],
        }
    }

    /// Single-bucket protocol restricted to one scale range.
    pub fn single_bucket(name: &str, lo: f64, hi: Option<f64>) -> Self {
        EvalProtocol {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoints,
            buckets: vec![BucketDef::new(name, lo, hi)],
            recall_fp_counts: vec![10, 50, 100, 200],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::invalid("IoU threshold must lie in (0, 1)"));
        }
        if self.buckets.is_empty() {
            return Err(Error::invalid("protocol needs at least one bucket"));
        }
        Ok(())
    }
}

/// Per-detection outcome of greedy matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched an out-of-bucket ground truth: costs nothing either way.
    Ignored,
}

/// Greedy matching of score-descending detections against one image's ground
/// truth. Each detection takes the highest-IoU unmatched in-bucket ground
/// truth at or above the threshold (TP); otherwise, if it overlaps any
/// out-of-bucket ground truth at the threshold it is ignored; otherwise FP.
pub fn greedy_match(
    detections: &[(Box, f64)],
    gts: &[Box],
    in_bucket: &[bool],
    iou_threshold: f64,
) -> (Vec<MatchFlag>, Vec<bool>) {
    debug_assert!(detections.windows(2).all(|w| w[0].1 >= w[1].1), "detections must be score-sorted");
    let mut matched = vec![false; gts.len()];
    let flags = detections
        .iter()
        .map(|(bbox, _)| {
            let mut best_iou = iou_threshold;
            let mut best: Option<usize> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if !in_bucket[gi] || matched[gi] {
                    continue;
                }
                let v = iou(bbox, gt);
                if v >= iou_threshold && (best.is_none() || v > best_iou) {
                    best_iou = v;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                matched[gi] = true;
                return MatchFlag::Tp;
            }
            let hits_ignored = gts
                .iter()
                .enumerate()
                .any(|(gi, gt)| !in_bucket[gi] && iou(bbox, gt) >= iou_threshold);
            if hits_ignored {
                MatchFlag::Ignored
            } else {
                MatchFlag::Fp
            }
        })
        .collect();
    (flags, matched)
}

/// Average precision over a score-descending flag sequence. Ignored flags
/// contribute nothing. `n_gt = 0` yields 0 by definition.
pub fn average_precision(flags: &[MatchFlag], n_gt: usize, interpolation: Interpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in flags {
        match f {
            MatchFlag::Tp => tp += 1,
            MatchFlag::Fp => fp += 1,
            MatchFlag::Ignored => continue,
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    if points.is_empty() {
        return 0.0;
    }
    // Precision envelope: max precision at or beyond each recall.
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    match interpolation {
        Interpolation::AllPoints => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (i, &(r, _)) in points.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * envelope[i];
                    prev_recall = r;
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut acc = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let p = points
                    .iter()
                    .zip(&envelope)
                    .find(|((recall, _), _)| *recall >= r)
                    .map(|(_, &e)| e)
                    .unwrap_or(0.0);
                acc += p;
            }
            acc / 11.0
        }
    }
}

/// Recall at each cumulative false-positive budget: the recall of the longest
/// score-descending prefix containing at most `count` false positives.
pub fn recall_at_fp(flags: &[MatchFlag], n_gt: usize, fp_counts: &[usize]) -> Vec<f64> {
    fp_counts
        .iter()
        .map(|&budget| {
            if n_gt == 0 {
                return 0.0;
            }
            let (mut tp, mut fp) = (0usize, 0usize);
            for f in flags {
                match f {
                    MatchFlag::Tp => tp += 1,
                    MatchFlag::Fp => {
                        fp += 1;
                        if fp > budget {
                            break;
                        }
                    }
                    MatchFlag::Ignored => {}
                }
            }
            tp as f64 / n_gt as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Box-to-ellipse linear regressor.
// ---------------------------------------------------------------------------

/// Bounding ellipse: center, semi-axes (major first), rotation angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl EllipseParams {
    fn as_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.a, self.b, self.angle]
    }
}

/// Least-squares linear map from `(x, y, w, h, 1)` to each ellipse parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseFit {
    /// One row of five coefficients per ellipse parameter.
    pub coeffs: [[f64; 5]; 5],
    pub residual_norm: f64,
}

impl EllipseFit {
    pub fn apply(&self, bbox: &Box) -> EllipseParams {
        let feat = [bbox.x, bbox.y, bbox.w, bbox.h, 1.0];
        let dot = |row: &[f64; 5]| row.iter().zip(&feat).map(|(a, b)| a * b).sum::<f64>();
        EllipseParams {
            cx: dot(&self.coeffs[0]),
            cy: dot(&self.coeffs[1]),
            a: dot(&self.coeffs[2]),
            b: dot(&self.coeffs[3]),
            angle: dot(&self.coeffs[4]),
        }
    }
}

/// Fits the box-to-ellipse map by least squares on the normal equations.
/// Needs at least as many pairs as coefficients (five) and a full-rank
/// design; otherwise the fit is degenerate.
pub fn fit_box_to_ellipse(pairs: &[(Box, EllipseParams)]) -> Result<EllipseFit> {
    if pairs.len() < 5 {
        return Err(Error::DegenerateFit);
    }
    // ata = A^T A (5x5), atb = A^T B (one column per target parameter).
    let mut ata = [[0.0f64; 5]; 5];
    let mut atb = [[0.0f64; 5]; 5];
    for (bbox, ellipse) in pairs {
        let feat = [bbox.x, bbox.y, bbox.w, bbox.h, 1.0];
        let target = ellipse.as_array();
        for i in 0..5 {
            for j in 0..5 {
                ata[i][j] += feat[i] * feat[j];
                atb[i][j] += feat[i] * target[j];
            }
        }
    }
    let solved = solve_5x5(ata, atb)?;
    let mut coeffs = [[0.0f64; 5]; 5];
    for (param, row) in coeffs.iter_mut().enumerate() {
        for f in 0..5 {
            row[f] = solved[f][param];
        }
    }
    let fit = EllipseFit { coeffs, residual_norm: 0.0 };
    let mut residual_sq = 0.0;
    for (bbox, ellipse) in pairs {
        let pred = fit.apply(bbox).as_array();
        let want = ellipse.as_array();
        residual_sq += pred.iter().zip(&want).map(|(p, w)| (p - w) * (p - w)).sum::<f64>();
    }
    Ok(EllipseFit { residual_norm: residual_sq.sqrt(), ..fit })
}

/// Gaussian elimination with partial pivoting on `ata * X = atb`.
fn solve_5x5(mut a: [[f64; 5]; 5], mut b: [[f64; 5]; 5]) -> Result<[[f64; 5]; 5]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..5 {
        let pivot_row = (col..5)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot_row][col].abs() < 1e-10 * scale {
            return Err(Error::DegenerateFit);
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in 0..5 {
            if row == col {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            for k in 0..5 {
                a[row][k] -= factor * a[col][k];
                b[row][k] -= factor * b[col][k];
            }
        }
    }
    for row in 0..5 {
        let d = a[row][row];
        for k in 0..5 {
            b[row][k] /= d;
        }
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation.
// ---------------------------------------------------------------------------

/// One point of a PR curve at a given score threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub ap: f64,
    pub n_gt: usize,
    pub n_detections: usize,
    pub pr: Vec<PrPoint>,
    /// (fp budget, recall) pairs.
    pub recall_at_fp: Vec<(usize, f64)>,
}

/// Deterministic evaluation report: per-bucket AP, PR curves, recall@FP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub buckets: BTreeMap<String, BucketReport>,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    pub fn ap(&self, bucket: &str) -> Option<f64> {
        self.buckets.get(bucket).map(|b| b.ap)
    }
}

/// Evaluates detections against annotations under a protocol. Detections may
/// arrive in any order; they are sorted internally with deterministic
/// tie-breaks, so shuffled input files produce identical reports. Detections
/// referencing unknown image ids are a hard error.
pub fn evaluate(
    detections: &[DetectionRecord],
    annotations: &[AnnotationRecord],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    let mut gt_by_image: BTreeMap<&str, Vec<Box>> = BTreeMap::new();
    for ann in annotations {
        gt_by_image.insert(
            &ann.image_id,
            ann.boxes.iter().map(|b| Box::new(b[0], b[1], b[2], b[3])).collect(),
        );
    }
    let mut unknown: Vec<String> = detections
        .iter()
        .filter(|d| !gt_by_image.contains_key(d.image_id.as_str()))
        .map(|d| d.image_id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownImageIds(unknown));
    }

    // Global deterministic order: descending score, then stable identity.
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &detections[i];
        let b = &detections[j];
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.x.partial_cmp(&b.x).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.y.partial_cmp(&b.y).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.w.partial_cmp(&b.w).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.h.partial_cmp(&b.h).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.detector_id.cmp(&b.detector_id))
    });

    // Detections grouped per image, kept in global score order.
    let mut per_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        per_image.entry(detections[i].image_id.as_str()).or_default().push(i);
    }

    let mut buckets = BTreeMap::new();
    for bucket in &protocol.buckets {
        let mut flag_by_det: BTreeMap<usize, MatchFlag> = BTreeMap::new();
        let mut n_gt = 0usize;
        for (image_id, gts) in &gt_by_image {
            let in_bucket: Vec<bool> = gts.iter().map(|g| bucket.contains(g.h)).collect();
            n_gt += in_bucket.iter().filter(|&&b| b).count();
            if let Some(det_ids) = per_image.get(image_id) {
                let pairs: Vec<(Box, f64)> = det_ids
                    .iter()
                    .map(|&i| (detections[i].bbox(), detections[i].score))
                    .collect();
                let (flags, _) = greedy_match(&pairs, gts, &in_bucket, protocol.iou_threshold);
                for (&i, f) in det_ids.iter().zip(flags) {
                    flag_by_det.insert(i, f);
                }
            }
        }
        let flags: Vec<MatchFlag> = order.iter().map(|i| flag_by_det[i]).collect();
        let ap = average_precision(&flags, n_gt, protocol.interpolation);

        let mut pr = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&i, f) in order.iter().zip(&flags) {
            match f {
                MatchFlag::Tp => tp += 1,
                MatchFlag::Fp => fp += 1,
                MatchFlag::Ignored => continue,
            }
            pr.push(PrPoint {
                threshold: detections[i].score,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 },
            });
        }
        let recalls = recall_at_fp(&flags, n_gt, &protocol.recall_fp_counts);
        buckets.insert(
            bucket.name.clone(),
            BucketReport {
                ap,
                n_gt,
                n_detections: detections.len(),
                pr,
                recall_at_fp: protocol.recall_fp_counts.iter().copied().zip(recalls).collect(),
            },
        );
    }
    Ok(EvalReport { buckets, protocol: protocol.clone() })
}

pub fn save_report(path: &std::path::Path, report: &EvalReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &std::path::Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
