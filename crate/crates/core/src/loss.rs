//! Masked sigmoid BCE classification loss, Smooth-L1 box loss and their
//! analytic gradients.
//!
//! Sums run in anchor-index order, then class order, so results are
//! reproducible bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::assign::AnchorAssignment;
use crate::dataspace::CategoryId;
use crate::geom::BoxDelta;
use crate::weights::WeightMask;
use crate::{Error, Result};

/// Probability clamp used inside the log terms.
pub const PROB_EPS: f64 = 1e-7;
pub const SMOOTH_L1_BETA: f64 = 1.0;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one (probability, target) pair.
pub fn bce_elem(p: f64, target: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if target {
        -libm::log(p)
    } else {
        -libm::log(1.0 - p)
    }
}

/// One-hot class targets: `Some(c)` for a positive anchor matched to `c`,
/// `None` (all zeros) otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    pub n_classes: usize,
    pub labels: Vec<Option<CategoryId>>,
}

impl ClassTargets {
    pub fn from_assignment(assignment: &AnchorAssignment, n_classes: usize) -> Self {
        ClassTargets {
            n_classes,
            labels: assignment
                .matches
                .iter()
                .map(|m| if m.is_positive() { m.category } else { None })
                .collect(),
        }
    }

    pub fn get(&self, anchor: usize, class: usize) -> bool {
        self.labels[anchor].map(|c| c.0) == Some(class)
    }
}

/// Raw logits per anchor and class, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPredictions {
    pub n_anchors: usize,
    pub n_classes: usize,
    pub logits: Vec<f64>,
}

impl ClassPredictions {
    pub fn new(n_anchors: usize, n_classes: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_anchors * n_classes {
            return Err(Error::ShapeMismatch {
                expected: n_anchors * n_classes,
                found: logits.len(),
            });
        }
        Ok(ClassPredictions {
            n_anchors,
            n_classes,
            logits,
        })
    }

    pub fn prob(&self, anchor: usize, class: usize) -> f64 {
        sigmoid(self.logits[anchor * self.n_classes + class])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub loss: f64,
    /// d loss / d logit, same layout as the logits.
    pub grad: Vec<f64>,
}

/// Positive-anchor count, at least one.
pub fn normalizer(num_positive: usize) -> f64 {
    num_positive.max(1) as f64
}

/// `(1/N) Σ ω(i,c) · bce(p_ic, p*_ic)` and its gradient `ω (p − p*) / N`.
pub fn masked_cls_loss(
    preds: &ClassPredictions,
    targets: &ClassTargets,
    mask: &WeightMask,
    normalizer: f64,
) -> Result<LossWithGrad> {
    let cells = preds.n_anchors * preds.n_classes;
    for found in [mask.values.len(), targets.labels.len() * targets.n_classes] {
        if found != cells {
            return Err(Error::ShapeMismatch { expected: cells, found });
        }
    }
    let k = preds.n_classes;
    let mut loss = 0.0;
    let mut grad = vec![0.0; cells];
    for i in 0..preds.n_anchors {
        for c in 0..k {
            let w = mask.values[i * k + c];
            if w == 0.0 {
                continue;
            }
            let p = sigmoid(preds.logits[i * k + c]);
            let y = targets.get(i, c);
            loss += w * bce_elem(p, y);
            grad[i * k + c] = w * (p - if y { 1.0 } else { 0.0 }) / normalizer;
        }
    }
    Ok(LossWithGrad {
        loss: loss / normalizer,
        grad,
    })
}

/// Smooth-L1 summed over the four offsets, with its gradient w.r.t. `pred`.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let t = target.to_array();
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = p[k] - t[k];
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            grad[k] = d / beta;
        } else {
            loss += d.abs() - 0.5 * beta;
            grad[k] = d.signum();
        }
    }
    (loss, grad)
}

/// Box loss over positive anchors, normalized by `normalizer`. `targets[i]`
/// is `Some` exactly for positive anchors; other anchors get zero gradient.
pub fn localization_loss(
    preds: &[BoxDelta],
    targets: &[Option<BoxDelta>],
    beta: f64,
    normalizer: f64,
) -> Result<(f64, Vec<[f64; 4]>)> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: targets.len(),
            found: preds.len(),
        });
    }
    let mut loss = 0.0;
    let mut grads = vec![[0.0; 4]; preds.len()];
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if let Some(t) = t {
            let (l, g) = smooth_l1(p, t, beta);
            loss += l;
            grads[i] = g.map(|v| v / normalizer);
        }
    }
    Ok((loss / normalizer, grads))
}

/// `L_cls + λ · L_loc`.
pub fn total_loss(cls: f64, loc: f64, lambda: f64) -> f64 {
    cls + lambda * loc
}
