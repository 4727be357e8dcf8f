//! Pseudo-annotation mining from repeated stochastic forward passes.
//!
//! Detections of the `T` passes over one image are grouped into clusters of
//! mutually overlapping, same-class boxes. Each cluster is summarized by its
//! mean box, its mean top-class probability `p̄` and its localization
//! confidence `ē`:
//!
//! ```text
//! ē = (1 + 1[|O| >= T/2]) / (2 |O|²) · Σ_{j1, j2} IoU(t_j1, t_j2)
//! ```
//!
//! where the double sum runs over all ordered member pairs, self-pairs
//! included. A cluster is accepted as a pseudo annotation when its class is
//! unlabeled in the image's dataset and its score (`d̄ = p̄ · ē` for CLC, `p̄`
//! for CC) exceeds `η`.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::dataspace::{Annotation, CategoryId, Source};
use crate::geom::{iou, BBox};
use crate::{Error, Result};

pub const DEFAULT_PASSES: usize = 20;
pub const TAU_NMS: f64 = 0.5;
pub const ETA: f64 = 0.5;
/// Detections whose top probability is below this are dropped before
/// clustering.
pub const MIN_SCORE: f64 = 0.05;
pub const DROPOUT_RATE: f64 = 0.1;

/// One detection from one stochastic pass.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PassDetection {
    pub image_id: u64,
    pub pass: usize,
    pub bbox: BBox,
    pub probs: Vec<f64>,
}

impl PassDetection {
    /// Top class (lowest index on ties) and its probability.
    pub fn top(&self) -> (CategoryId, f64) {
        let mut best = 0;
        for (c, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = c;
            }
        }
        (CategoryId(best), self.probs.get(best).copied().unwrap_or(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MiningMode {
    /// Classification and localization confidence: score `p̄ · ē`.
    Clc,
    /// Classification confidence only: score `p̄`.
    Cc,
}

impl fmt::Display for MiningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiningMode::Clc => "clc",
            MiningMode::Cc => "cc",
        })
    }
}

impl FromStr for MiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clc" => Ok(MiningMode::Clc),
            "cc" => Ok(MiningMode::Cc),
            other => Err(Error::InvalidConfig(alloc::format!("unknown mining mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MiningConfig {
    pub passes: usize,
    pub tau_nms: f64,
    pub eta: f64,
    pub dropout: f64,
    pub mode: MiningMode,
    pub min_score: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            passes: DEFAULT_PASSES,
            tau_nms: TAU_NMS,
            eta: ETA,
            dropout: DROPOUT_RATE,
            mode: MiningMode::Clc,
            min_score: MIN_SCORE,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if self.passes == 0 {
            return Err(Error::InvalidConfig("pass count must be at least 1".into()));
        }
        if !open(self.tau_nms) || !open(self.eta) {
            return Err(Error::InvalidConfig("tau_nms and eta must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.min_score) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1], min_score in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidences {
    pub integrated: BBox,
    pub classification: f64,
    pub localization: f64,
    pub detection: f64,
}

/// Mean box and the three confidences of a non-empty member set.
pub fn confidences(members: &[PassDetection], passes: usize) -> Confidences {
    assert!(!members.is_empty(), "cluster must have members");
    let n = members.len() as f64;
    let mut sum = [0.0; 4];
    let mut p_sum = 0.0;
    for m in members {
        sum[0] += m.bbox.x1;
        sum[1] += m.bbox.y1;
        sum[2] += m.bbox.x2;
        sum[3] += m.bbox.y2;
        p_sum += m.top().1;
    }
    let integrated = BBox {
        x1: sum[0] / n,
        y1: sum[1] / n,
        x2: sum[2] / n,
        y2: sum[3] / n,
    };
    let mut pair_sum = 0.0;
    for a in members {
        for b in members {
            pair_sum += iou(&a.bbox, &b.bbox);
        }
    }
    let large = 2 * members.len() >= passes;
    let localization = (1.0 + if large { 1.0 } else { 0.0 }) / (2.0 * n * n) * pair_sum;
    let classification = p_sum / n;
    Confidences {
        integrated,
        classification,
        localization,
        detection: classification * localization,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCluster {
    pub class: CategoryId,
    pub members: Vec<PassDetection>,
    pub integrated: BBox,
    pub classification: f64,
    pub localization: f64,
    pub detection: f64,
}

impl DetectionCluster {
    pub fn new(class: CategoryId, members: Vec<PassDetection>, passes: usize) -> Self {
        let c = confidences(&members, passes);
        DetectionCluster {
            class,
            members,
            integrated: c.integrated,
            classification: c.classification,
            localization: c.localization,
            detection: c.detection,
        }
    }

    pub fn score(&self, mode: MiningMode) -> f64 {
        match mode {
            MiningMode::Clc => self.detection,
            MiningMode::Cc => self.classification,
        }
    }
}

/// Greedy clustering of one image's pass detections.
///
/// Detections are visited by descending top probability (input order on
/// ties). Each joins the first cluster of its top class that it overlaps
/// with IoU ≥ `tau_nms` for every member and that holds no detection from the
/// same pass; otherwise it starts a new cluster. Clusters come out in
/// creation order.
pub fn cluster(detections: &[PassDetection], tau_nms: f64, passes: usize) -> Vec<DetectionCluster> {
    let order = crate::geom::score_order(detections, |d| d.top().1);
    let mut groups: Vec<(CategoryId, Vec<usize>)> = Vec::new();
    for i in order {
        let d = &detections[i];
        let class = d.top().0;
        let slot = groups.iter_mut().find(|(c, members)| {
            *c == class
                && members.iter().all(|&j| {
                    detections[j].pass != d.pass && iou(&detections[j].bbox, &d.bbox) >= tau_nms
                })
        });
        match slot {
            Some((_, members)) => members.push(i),
            None => groups.push((class, alloc::vec![i])),
        }
    }
    groups
        .into_iter()
        .map(|(class, idx)| {
            let members = idx.into_iter().map(|j| detections[j].clone()).collect();
            DetectionCluster::new(class, members, passes)
        })
        .collect()
}

/// Drops detections whose top probability is below `min_score`.
pub fn prefilter(detections: &[PassDetection], min_score: f64) -> Vec<PassDetection> {
    detections
        .iter()
        .filter(|d| d.top().1 >= min_score)
        .cloned()
        .collect()
}

/// Turns the clusters of one image into pseudo annotations: class unlabeled
/// in the source dataset and score strictly above `eta`. Annotation ids are
/// left at 0 for the caller to assign.
pub fn accept(
    clusters: &[DetectionCluster],
    image_id: u64,
    labeled: &[bool],
    eta: f64,
    mode: MiningMode,
) -> Vec<Annotation> {
    clusters
        .iter()
        .filter(|c| !labeled.get(c.class.0).copied().unwrap_or(false))
        .filter(|c| c.score(mode) > eta)
        .map(|c| Annotation {
            id: 0,
            image_id,
            category: c.class,
            bbox: c.integrated,
            source: Source::Pseudo,
            confidence: Some(c.score(mode)),
        })
        .collect()
}

/// Prefilter, cluster and accept in one go.
pub fn mine_image(
    detections: &[PassDetection],
    image_id: u64,
    labeled: &[bool],
    config: &MiningConfig,
) -> Vec<Annotation> {
    let kept = prefilter(detections, config.min_score);
    let clusters = cluster(&kept, config.tau_nms, config.passes);
    accept(&clusters, image_id, labeled, config.eta, config.mode)
}

impl fmt::Display for DetectionCluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "class {} x{} p={:.3} e={:.3} d={:.3}",
            self.class.0,
            self.members.len(),
            self.classification,
            self.localization,
            self.detection
        )
    }
}
