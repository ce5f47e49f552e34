//! Segmentation mIoU, detection mAP and their geometric-mean combination.

use serde::{Deserialize, Serialize};

use super::loss::Detection;
use super::scene::BBox;
use crate::error::{Error, Result};

pub const IOU_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub miou: f64,
    pub combined: f64,
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn new(map: f64, miou: f64, per_class_ap: Vec<Option<f64>>, per_class_iou: Vec<Option<f64>>) -> Result<Self> {
        Ok(Self {
            map,
            miou,
            combined: combined_metric(map, miou)?,
            per_class_ap,
            per_class_iou,
        })
    }
}

/// Geometric mean of per-task metrics, each in `[0, 1]`.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("geometric mean of no values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Metric(format!("metric {v} outside [0, 1]")));
    }
    if values.len() == 2 {
        return Ok((values[0] * values[1]).sqrt());
    }
    let prod: f64 = values.iter().product();
    Ok(prod.powf(1.0 / values.len() as f64))
}

/// `sqrt(mAP * mIoU)`.
pub fn combined_metric(map: f64, miou: f64) -> Result<f64> {
    geometric_mean(&[map, miou])
}

/// Per-class IoU accumulated over all scenes; the mean runs over classes
/// present in the ground truth.
pub fn eval_miou(pred: &[Vec<usize>], truth: &[Vec<usize>], n_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if truth.is_empty() {
        return Err(Error::Metric("empty validation set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions for {} scenes", pred.len(), truth.len())));
    }
    let mut inter = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut gt_count = vec![0usize; n_classes];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Metric("prediction and label maps differ in size".into()));
        }
        for (&a, &b) in p.iter().zip(t) {
            if a >= n_classes || b >= n_classes {
                return Err(Error::Metric(format!("class id out of range ({a}, {b})")));
            }
            pred_count[a] += 1;
            gt_count[b] += 1;
            if a == b {
                inter[a] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            (gt_count[c] > 0).then(|| {
                let union = gt_count[c] + pred_count[c] - inter[c];
                inter[c] as f64 / union as f64
            })
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((miou, per_class))
}

/// All-point interpolated AP from a ranked list of true/false positive flags.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope: p(r) = max precision at any recall >= r.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

/// Mean AP at IoU >= 0.5 with greedy matching by descending score. Ground
/// truth and predictions smaller than `min_area` are dropped; classes without
/// ground truth are left out of the mean.
pub fn eval_map(pred: &[Vec<Detection>], truth: &[Vec<BBox>], n_classes: usize, min_area: f64) -> Result<(f64, Vec<Option<f64>>)> {
    if truth.is_empty() {
        return Err(Error::Metric("empty validation set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions for {} scenes", pred.len(), truth.len())));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let gts: Vec<Vec<&BBox>> = truth
            .iter()
            .map(|bs| bs.iter().filter(|b| b.class == class && b.area() >= min_area).collect())
            .collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut dets: Vec<(usize, &Detection)> = pred
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().map(move |d| (i, d)))
            .filter(|(_, d)| d.bbox.class == class && d.bbox.area() >= min_area)
            .collect();
        // Stable sort keeps scene order among equal scores.
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let ranked: Vec<bool> = dets
            .iter()
            .map(|(img, d)| {
                let best = gts[*img]
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !matched[*img][*j])
                    .map(|(j, g)| (j, d.bbox.iou(g)))
                    .filter(|(_, iou)| *iou >= IOU_MATCH_THRESHOLD)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((j, _)) => {
                        matched[*img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(Some(average_precision(&ranked, n_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((map, per_class))
}
