//! Detection scoring: IoU, greedy one-to-one matching, PR curves, AP, µAP
//! and F-beta.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detection::DetectionSet;
use crate::error::{FlimError, Result};
use crate::markers::{BoundingBox, GroundTruth};

pub const F_BETA: f64 = 2.0;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Intersection over union of half-open pixel boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1)) as u64;
    let ih = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1)) as u64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tau: f64,
    /// Per prediction, in the order given: matched ground-truth index.
    pub matched: Vec<Option<usize>>,
    /// Per prediction: best IoU against the ground truth still unmatched
    /// when it was considered.
    pub ious: Vec<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching: predictions are taken in the order given (descending
/// score expected); each claims the unmatched ground-truth box of highest IoU
/// if that IoU is strictly above `tau`.
pub fn match_detections(preds: &[BoundingBox], gt: &[BoundingBox], tau: f64) -> MatchResult {
    let mut taken = vec![false; gt.len()];
    let mut matched = Vec::with_capacity(preds.len());
    let mut ious = Vec::with_capacity(preds.len());
    let mut tp = 0;
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(p, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v > tau => {
                taken[gi] = true;
                tp += 1;
                matched.push(Some(gi));
                ious.push(v);
            }
            other => {
                matched.push(None);
                ious.push(other.map_or(0.0, |(_, v)| v));
            }
        }
    }
    MatchResult {
        tau,
        matched,
        ious,
        tp,
        fp: preds.len() - tp,
        fn_: gt.len() - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub tau: f64,
    /// One point per prediction in global descending-score order.
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub total_gt: usize,
    pub tp: usize,
    pub fp: usize,
}

impl PrCurve {
    /// Precision and recall with every emitted box counted.
    pub fn operating_point(&self) -> (f64, f64) {
        let n = self.tp + self.fp;
        let precision = if n == 0 { 0.0 } else { self.tp as f64 / n as f64 };
        (precision, self.tp as f64 / self.total_gt as f64)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        let (p, r) = self.operating_point();
        f_beta(p, r, beta)
    }
}

/// All-point area under the precision envelope.
pub fn ap(points: &[PrPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, &env) in points.iter().zip(&envelope) {
        area += (p.recall - prev_recall).max(0.0) * env;
        prev_recall = p.recall;
    }
    area.clamp(0.0, 1.0)
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub image_id: String,
    pub preds: Vec<BoundingBox>,
    pub gt: Vec<BoundingBox>,
}

/// Pairs detection sets with ground truth by image id. Images with ground
/// truth but no detections contribute only false negatives; detections for
/// an image without ground truth are an error.
pub fn pair_with_ground_truth(dets: &[DetectionSet], gts: &[GroundTruth]) -> Result<Vec<EvalImage>> {
    let mut by_id: BTreeMap<&str, EvalImage> = BTreeMap::new();
    for g in gts {
        if by_id.contains_key(g.image_id.as_str()) {
            return Err(FlimError::domain(format!("duplicate ground truth for image {}", g.image_id)));
        }
        by_id.insert(
            &g.image_id,
            EvalImage {
                image_id: g.image_id.clone(),
                preds: Vec::new(),
                gt: g.boxes.clone(),
            },
        );
    }
    for d in dets {
        match by_id.get_mut(d.image_id.as_str()) {
            Some(e) => e.preds.extend(d.boxes.iter().copied()),
            None => {
                return Err(FlimError::domain(format!(
                    "no ground truth for image {}",
                    d.image_id
                )))
            }
        }
    }
    Ok(by_id.into_values().collect())
}

// Indices of `boxes` by descending score; ties keep input order.
fn score_order(boxes: &[BoundingBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    idx
}

/// PR curve at `tau` over all images. Matching is per image; the sweep uses
/// one global descending-score order (ties by image, then rank).
pub fn pr_curve(images: &[EvalImage], tau: f64) -> Result<PrCurve> {
    let total_gt: usize = images.iter().map(|e| e.gt.len()).sum();
    if total_gt == 0 {
        return Err(FlimError::NoGroundTruth);
    }
    // (score, image, rank, is_tp)
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (ii, e) in images.iter().enumerate() {
        let order = score_order(&e.preds);
        let sorted: Vec<BoundingBox> = order.iter().map(|&i| e.preds[i]).collect();
        let m = match_detections(&sorted, &e.gt, tau);
        for (rank, (b, hit)) in sorted.iter().zip(&m.matched).enumerate() {
            ranked.push((b.score, ii, rank, hit.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let (mut tp, mut fp) = (0usize, 0usize);
    let points: Vec<PrPoint> = ranked
        .iter()
        .map(|&(_, _, _, hit)| {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: tp as f64 / total_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect();
    Ok(PrCurve {
        tau,
        ap: ap(&points),
        points,
        total_gt,
        tp,
        fp,
    })
}

/// Mean of AP over the ten IoU thresholds.
pub fn mean_ap(images: &[EvalImage]) -> Result<f64> {
    let mut sum = 0.0;
    for tau in iou_thresholds() {
        sum += pr_curve(images, tau)?.ap;
    }
    Ok(sum / 10.0)
}

/// `(1 + b^2) P R / (b^2 P + R)`, zero when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "F2_50")]
    pub f2_50: f64,
    #[serde(rename = "AP_50")]
    pub ap_50: f64,
    #[serde(rename = "F2_75")]
    pub f2_75: f64,
    #[serde(rename = "AP_75")]
    pub ap_75: f64,
    #[serde(rename = "muAP")]
    pub mu_ap: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// One curve per IoU threshold, ascending.
    pub curves: Vec<PrCurve>,
}

impl Evaluation {
    pub fn curve(&self, tau: f64) -> Option<&PrCurve> {
        self.curves.iter().find(|c| (c.tau - tau).abs() < 1e-12)
    }
}

pub fn evaluate(images: &[EvalImage]) -> Result<Evaluation> {
    let curves = iou_thresholds()
        .into_iter()
        .map(|tau| pr_curve(images, tau))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport {
        f2_50: curves[0].f_beta(F_BETA),
        ap_50: curves[0].ap,
        f2_75: curves[5].f_beta(F_BETA),
        ap_75: curves[5].ap,
        mu_ap: curves.iter().map(|c| c.ap).sum::<f64>() / curves.len() as f64,
    };
    Ok(Evaluation { report, curves })
}

/// CSV with header `tau,rank,recall,precision`; ranks start at 1.
pub fn curves_csv(curves: &[PrCurve]) -> String {
    let mut out = String::from("tau,rank,recall,precision\n");
    for c in curves {
        for (i, p) in c.points.iter().enumerate() {
            let _ = writeln!(out, "{:.2},{},{},{}", c.tau, i + 1, p.recall, p.precision);
        }
    }
    out
}
