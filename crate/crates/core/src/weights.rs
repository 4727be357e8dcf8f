//! Per-anchor, per-class weights `ω(i, c)` for the classification loss.
//!
//! Every strategy starts from the same observation: for a class `c` that the
//! image's source dataset does not annotate ("foreign"), a background label
//! may be wrong. The strategies differ in which (anchor, foreign class) cells
//! they trust.
//!
//! Two rules hold for all strategies:
//! - anchors in the ignore band get weight 0 for every class;
//! - the class a positive anchor is matched to always gets weight 1. In the
//!   first training phase that class is always labeled; during retraining it
//!   can be the foreign class of a mined box.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::assign::{AnchorAssignment, AnchorMatch, AnchorStatus};
use crate::geom::{iou, BBox};
use crate::{Error, Result};

/// Default strict IoU a positive anchor needs before it may supply negatives
/// to foreign classes.
pub const TAU_S: f64 = 0.9;
/// Lower mining threshold producing the high-recall boxes used by the
/// safe-negatives strategy.
pub const ETA_PRIME: f64 = 0.1;
/// Values of the Gompertz schedule below this are flushed to zero.
pub const GOMPERTZ_FLUSH: f64 = 1e-12;

/// Dense `anchors x classes` weight matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    pub n_anchors: usize,
    pub n_classes: usize,
    pub values: Vec<f64>,
}

impl WeightMask {
    pub fn filled(n_anchors: usize, n_classes: usize, value: f64) -> Self {
        WeightMask {
            n_anchors,
            n_classes,
            values: vec![value; n_anchors * n_classes],
        }
    }

    pub fn get(&self, anchor: usize, class: usize) -> f64 {
        self.values[anchor * self.n_classes + class]
    }

    pub fn row(&self, anchor: usize) -> &[f64] {
        &self.values[anchor * self.n_classes..(anchor + 1) * self.n_classes]
    }

    fn from_fn(
        assignment: &AnchorAssignment,
        n_classes: usize,
        mut cell: impl FnMut(usize, &AnchorMatch, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(assignment.len() * n_classes);
        for (i, m) in assignment.matches.iter().enumerate() {
            for c in 0..n_classes {
                let w = if m.status == AnchorStatus::Ignore {
                    0.0
                } else if m.category.map(|k| k.0) == Some(c) {
                    1.0
                } else {
                    cell(i, m, c)
                };
                values.push(w);
            }
        }
        WeightMask {
            n_anchors: assignment.len(),
            n_classes,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Strategy {
    /// Every cell counts; missing labels are read as background.
    Plain,
    ConflictFree,
    /// Conflict-free without the strict-IoU clause on positives.
    DatasetAware,
    /// Retraining with Gompertz-weighted foreign negatives.
    OverlapWeighted,
    SafeNegatives,
    AsFullyLabeled,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Plain,
        Strategy::ConflictFree,
        Strategy::DatasetAware,
        Strategy::OverlapWeighted,
        Strategy::SafeNegatives,
        Strategy::AsFullyLabeled,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::ConflictFree => "conflict_free",
            Strategy::DatasetAware => "dataset_aware",
            Strategy::OverlapWeighted => "overlap_weighted",
            Strategy::SafeNegatives => "safe_negatives",
            Strategy::AsFullyLabeled => "as_fully_labeled",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GompertzParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for GompertzParams {
    fn default() -> Self {
        GompertzParams {
            a: 1.0,
            b: 10_000.0,
            c: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub tau_s: f64,
    pub gompertz: GompertzParams,
    pub eta_prime: f64,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            tau_s: TAU_S,
            gompertz: GompertzParams::default(),
            eta_prime: ETA_PRIME,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_s <= 1.0) {
            return Err(Error::InvalidConfig("tau_s must lie in (0, 1]".into()));
        }
        let g = self.gompertz;
        if !(g.a > 0.0 && g.b > 0.0 && g.c > 0.0) {
            return Err(Error::InvalidConfig("Gompertz parameters must be positive".into()));
        }
        if !(self.eta_prime > 0.0 && self.eta_prime < 1.0) {
            return Err(Error::InvalidConfig("eta_prime must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `a · exp(−b · exp(−c · x))`, evaluated in log space.
pub fn gompertz(x: f64, params: &GompertzParams) -> f64 {
    let log_w = libm::log(params.a) - params.b * libm::exp(-params.c * x);
    let w = libm::exp(log_w);
    if w < GOMPERTZ_FLUSH {
        0.0
    } else {
        w
    }
}

fn foreign(labeled: &[bool], c: usize) -> bool {
    !labeled[c]
}

/// Conflict-free weights: a foreign class gets weight 0 on negatives and on
/// positives whose best IoU is below `tau_s`.
pub fn conflict_free_mask(assignment: &AnchorAssignment, labeled: &[bool], tau_s: f64) -> WeightMask {
    WeightMask::from_fn(assignment, labeled.len(), |_, m, c| {
        let conflict = match m.status {
            AnchorStatus::Negative => true,
            AnchorStatus::Positive => m.max_iou < tau_s,
            AnchorStatus::Ignore => unreachable!(),
        };
        if foreign(labeled, c) && conflict {
            0.0
        } else {
            1.0
        }
    })
}

/// Retraining weights: foreign cells of negative anchors are scaled by the
/// Gompertz schedule of the anchor's best overlap; everything else is 1.
pub fn retrain_mask(assignment: &AnchorAssignment, labeled: &[bool], params: &GompertzParams) -> WeightMask {
    WeightMask::from_fn(assignment, labeled.len(), |_, m, c| {
        if foreign(labeled, c) && m.status == AnchorStatus::Negative {
            gompertz(m.max_iou, params)
        } else {
            1.0
        }
    })
}

pub fn plain_mask(assignment: &AnchorAssignment, n_classes: usize) -> WeightMask {
    WeightMask::from_fn(assignment, n_classes, |_, _, _| 1.0)
}

pub fn dataset_aware_mask(assignment: &AnchorAssignment, labeled: &[bool]) -> WeightMask {
    WeightMask::from_fn(assignment, labeled.len(), |_, m, c| {
        if foreign(labeled, c) && m.status == AnchorStatus::Negative {
            0.0
        } else {
            1.0
        }
    })
}

/// Conflict-free weights, except that a negative anchor whose IoU with every
/// high-recall mined box stays below `match_thr` keeps weight 1 on foreign
/// classes.
pub fn safe_negatives_mask(
    assignment: &AnchorAssignment,
    labeled: &[bool],
    anchors: &[BBox],
    high_recall: &[BBox],
    tau_s: f64,
    match_thr: f64,
) -> Result<WeightMask> {
    if anchors.len() != assignment.len() {
        return Err(Error::ShapeMismatch {
            expected: assignment.len(),
            found: anchors.len(),
        });
    }
    let safe: Vec<bool> = anchors
        .iter()
        .map(|a| high_recall.iter().map(|b| iou(a, b)).fold(0.0, f64::max) < match_thr)
        .collect();
    Ok(WeightMask::from_fn(assignment, labeled.len(), |i, m, c| {
        let conflict = match m.status {
            AnchorStatus::Negative => !safe[i],
            AnchorStatus::Positive => m.max_iou < tau_s,
            AnchorStatus::Ignore => unreachable!(),
        };
        if foreign(labeled, c) && conflict {
            0.0
        } else {
            1.0
        }
    }))
}

/// Boxes needed by the safe-negatives strategy.
#[derive(Debug, Clone, Copy)]
pub struct HighRecall<'a> {
    pub anchors: &'a [BBox],
    pub boxes: &'a [BBox],
    pub match_thr: f64,
}

/// Masks for the strategies compared against overlap weighting. The
/// high-recall boxes must be supplied for `SafeNegatives` and only for it.
pub fn baseline_mask(
    strategy: Strategy,
    assignment: &AnchorAssignment,
    labeled: &[bool],
    tau_s: f64,
    high_recall: Option<HighRecall<'_>>,
) -> Result<WeightMask> {
    match (strategy, high_recall) {
        (Strategy::SafeNegatives, Some(hr)) => {
            safe_negatives_mask(assignment, labeled, hr.anchors, hr.boxes, tau_s, hr.match_thr)
        }
        (Strategy::SafeNegatives, None) => Err(Error::InvalidConfig(
            "safe_negatives needs high-recall pseudo boxes".into(),
        )),
        (_, Some(_)) => Err(Error::InvalidConfig(
            "high-recall pseudo boxes are only used by safe_negatives".into(),
        )),
        (Strategy::Plain | Strategy::AsFullyLabeled, None) => Ok(plain_mask(assignment, labeled.len())),
        (Strategy::DatasetAware, None) => Ok(dataset_aware_mask(assignment, labeled)),
        (other, None) => Err(Error::UnknownStrategy(other.tag().to_string())),
    }
}

/// Builds the mask of any strategy.
pub fn mask_for(
    config: &StrategyConfig,
    assignment: &AnchorAssignment,
    labeled: &[bool],
    high_recall: Option<HighRecall<'_>>,
) -> Result<WeightMask> {
    match config.strategy {
        Strategy::ConflictFree => Ok(conflict_free_mask(assignment, labeled, config.tau_s)),
        Strategy::OverlapWeighted => Ok(retrain_mask(assignment, labeled, &config.gompertz)),
        other => baseline_mask(other, assignment, labeled, config.tau_s, high_recall),
    }
}
