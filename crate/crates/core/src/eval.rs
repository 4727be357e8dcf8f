//! Greedy detection matching and COCO-style 101-point average precision.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataspace::{Annotation, CategoryId};
use crate::geom::{iou, score_order, BBox};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|k| 0.5 + 0.05 * k as f64)
}

/// Score cut used for the TP/FP counts of an [`EvalResult`].
pub const SCORE_CUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub image_id: u64,
    pub class: CategoryId,
    pub bbox: BBox,
    pub score: f64,
}

/// Marks each detection (already in descending score order) a true positive
/// when it overlaps a not yet matched truth with IoU ≥ `iou_thr`; it takes
/// the highest-IoU such truth, lowest index on ties.
pub fn match_detections(detections: &[BBox], truths: &[BBox], iou_thr: f64) -> Vec<bool> {
    let mut taken = vec![false; truths.len()];
    detections
        .iter()
        .map(|d| {
            let mut best: Option<usize> = None;
            let mut best_iou = iou_thr;
            for (j, t) in truths.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(d, t);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best = Some(j);
                    best_iou = v;
                }
            }
            if let Some(j) = best {
                taken[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// 101-point interpolated AP from ranked TP/FP flags. The precision envelope
/// is sampled at recall 0.00, 0.01, ..., 1.00; recall levels never reached
/// contribute zero.
pub fn average_precision(flags: &[bool], total_truths: usize) -> f64 {
    if total_truths == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_truths as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassResult {
    pub class: CategoryId,
    pub num_truths: usize,
    /// Mean over the ten IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub classes: Vec<ClassResult>,
    /// Unweighted means over classes that have at least one truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl EvalResult {
    pub fn class(&self, class: CategoryId) -> Option<&ClassResult> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// Mean of `metric` over the given classes, skipping classes without
    /// truths. Zero when none qualify.
    pub fn mean_over(&self, classes: &[CategoryId], metric: impl Fn(&ClassResult) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .classes
            .iter()
            .filter(|c| classes.contains(&c.class) && c.num_truths > 0)
            .map(metric)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

fn class_flags(dets: &[&Detection], truths: &BTreeMap<u64, Vec<BBox>>, thr: f64) -> Vec<bool> {
    let mut taken: BTreeMap<u64, Vec<bool>> = truths
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let empty = Vec::new();
    dets.iter()
        .map(|d| {
            let boxes = truths.get(&d.image_id).unwrap_or(&empty);
            let Some(used) = taken.get_mut(&d.image_id) else {
                return false;
            };
            let mut best: Option<usize> = None;
            let mut best_iou = thr;
            for (j, t) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&d.bbox, t);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best = Some(j);
                    best_iou = v;
                }
            }
            if let Some(j) = best {
                used[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Evaluates `detections` against fully labeled `truths` for `classes`.
/// Detections of one class are ranked across all images by score; within an
/// image matching is greedy in that order.
pub fn evaluate(detections: &[Detection], truths: &[Annotation], classes: &[CategoryId]) -> EvalResult {
    let thresholds = iou_thresholds();
    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let mut by_image: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
        for t in truths.iter().filter(|t| t.category == class) {
            by_image.entry(t.image_id).or_default().push(t.bbox);
        }
        let num_truths = by_image.values().map(Vec::len).sum();
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
        let order = score_order(&dets, |d| d.score);
        let ranked: Vec<&Detection> = order.iter().map(|&i| dets[i]).collect();

        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&thr| average_precision(&class_flags(&ranked, &by_image, thr), num_truths))
            .collect();
        let flags50 = class_flags(&ranked, &by_image, 0.5);
        let (mut tp, mut fp) = (0, 0);
        for (d, f) in ranked.iter().zip(&flags50) {
            if d.score >= SCORE_CUT {
                if *f {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push(ClassResult {
            class,
            num_truths,
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
            tp,
            fp,
        });
    }
    let mut result = EvalResult {
        classes: out,
        ap: 0.0,
        ap50: 0.0,
        ap75: 0.0,
    };
    result.ap = result.mean_over(classes, |c| c.ap);
    result.ap50 = result.mean_over(classes, |c| c.ap50);
    result.ap75 = result.mean_over(classes, |c| c.ap75);
    result
}
