//! Anchor generation and IoU-threshold assignment against annotated boxes.

use alloc::vec::Vec;

use crate::dataspace::{Annotation, CategoryId};
use crate::geom::{encode, iou, BBox, BoxDelta};
use crate::{Error, Result};

/// Default IoU at or above which an anchor becomes positive.
pub const POS_IOU: f64 = 0.5;
/// Default IoU below which an anchor becomes negative.
pub const NEG_IOU: f64 = 0.4;

/// Single-level anchor grid: one anchor per cell, scale and aspect ratio.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorGrid {
    pub image_width: f64,
    pub image_height: f64,
    pub stride: f64,
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
    anchors: Vec<BBox>,
}

impl AnchorGrid {
    /// Anchors are centered on cell centers and are not clipped to the image.
    /// Order is row, column, scale, ratio.
    pub fn new(
        image_width: f64,
        image_height: f64,
        stride: f64,
        scales: Vec<f64>,
        ratios: Vec<f64>,
    ) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(image_width) && positive(image_height) && positive(stride))
            || !scales.iter().all(|s| positive(*s))
            || !ratios.iter().all(|r| positive(*r))
        {
            return Err(Error::InvalidConfig("anchor grid sizes must be positive".into()));
        }
        let cols = libm::ceil(image_width / stride) as usize;
        let rows = libm::ceil(image_height / stride) as usize;
        let mut anchors = Vec::with_capacity(rows * cols * scales.len() * ratios.len());
        for r in 0..rows {
            for c in 0..cols {
                let cx = (c as f64 + 0.5) * stride;
                let cy = (r as f64 + 0.5) * stride;
                for &s in &scales {
                    for &ratio in &ratios {
                        let k = libm::sqrt(ratio);
                        anchors.push(BBox::from_center(cx, cy, s / k, s * k));
                    }
                }
            }
        }
        if anchors.is_empty() {
            return Err(Error::EmptyAnchors);
        }
        Ok(AnchorGrid {
            image_width,
            image_height,
            stride,
            scales,
            ratios,
            anchors,
        })
    }

    pub fn cells(&self) -> usize {
        self.anchors.len() / (self.scales.len() * self.ratios.len())
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AnchorStatus {
    Positive,
    Negative,
    Ignore,
}

/// Match outcome for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMatch {
    pub status: AnchorStatus,
    /// Index into the annotation list (positives only).
    pub annotation: Option<usize>,
    pub category: Option<CategoryId>,
    /// Maximum IoU with any annotation, regardless of class.
    pub max_iou: f64,
    pub target: Option<BoxDelta>,
    /// Set when the anchor was made positive only because it is the best
    /// anchor of an otherwise unmatched annotation. Such anchors may have
    /// `max_iou` below the positive threshold.
    pub forced: bool,
}

impl AnchorMatch {
    fn negative(max_iou: f64) -> Self {
        AnchorMatch {
            status: AnchorStatus::Negative,
            annotation: None,
            category: None,
            max_iou,
            target: None,
            forced: false,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.status == AnchorStatus::Positive
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    pub matches: Vec<AnchorMatch>,
}

impl AnchorAssignment {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.matches.iter().filter(|m| m.is_positive()).count()
    }

    pub fn statuses(&self) -> impl Iterator<Item = AnchorStatus> + '_ {
        self.matches.iter().map(|m| m.status)
    }
}

/// Labels every anchor positive, negative or ignored.
///
/// An anchor is positive for its highest-IoU annotation (lowest index on
/// ties) when that IoU reaches `pos_thr`, negative below `neg_thr`, ignored in
/// between. Afterwards every annotation without any anchor at `pos_thr` is
/// given its single best anchor (lowest index on ties) when that anchor has
/// any overlap and has not been forced onto an earlier annotation.
pub fn assign(
    anchors: &[BBox],
    annotations: &[Annotation],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<AnchorAssignment> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchors);
    }
    if neg_thr > pos_thr || !(0.0..=1.0).contains(&pos_thr) || !(0.0..=1.0).contains(&neg_thr) {
        return Err(Error::InvalidThresholds {
            pos: pos_thr,
            neg: neg_thr,
        });
    }

    let n_ann = annotations.len();
    let mut overlaps = Vec::with_capacity(anchors.len() * n_ann);
    for a in anchors {
        overlaps.extend(annotations.iter().map(|g| iou(a, &g.bbox)));
    }

    let make_positive = |i: usize, j: usize, max_iou: f64, forced: bool| -> Result<AnchorMatch> {
        let gt = &annotations[j];
        Ok(AnchorMatch {
            status: AnchorStatus::Positive,
            annotation: Some(j),
            category: Some(gt.category),
            max_iou,
            target: Some(encode(&anchors[i], &gt.bbox)?),
            forced,
        })
    };

    let mut matches = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let row = &overlaps[i * n_ann..(i + 1) * n_ann];
        let mut best = None;
        let mut f = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if best.is_none() || v > f {
                best = Some(j);
                f = v;
            }
        }
        let m = match best {
            Some(j) if f >= pos_thr => make_positive(i, j, f, false)?,
            _ if f < neg_thr => AnchorMatch::negative(f),
            _ => AnchorMatch {
                status: AnchorStatus::Ignore,
                ..AnchorMatch::negative(f)
            },
        };
        matches.push(m);
    }

    for j in 0..n_ann {
        let mut best: Option<usize> = None;
        let mut best_iou = 0.0;
        for i in 0..anchors.len() {
            let v = overlaps[i * n_ann + j];
            if v > best_iou {
                best = Some(i);
                best_iou = v;
            }
        }
        if let Some(i) = best.filter(|_| best_iou < pos_thr) {
            if !matches[i].forced {
                matches[i] = make_positive(i, j, matches[i].max_iou, true)?;
            }
        }
    }

    Ok(AnchorAssignment { matches })
}
