//! Axis-aligned box geometry: IoU, center/log-size box deltas and greedy NMS.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Largest magnitude accepted for a log width/height offset when decoding.
/// `exp(10)` is a 22026x rescale, far beyond any sane regression output, and
/// keeps decoded coordinates finite.
pub const MAX_LOG_SCALE: f64 = 10.0;

/// Axis-aligned rectangle in corner convention, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox)
        }
    }

    /// Converts a COCO `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Regression offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn check_positive(b: &BBox) -> Result<()> {
    if b.is_valid() && b.width() > 0.0 && b.height() > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateAnchor)
    }
}

/// Offsets that carry `anchor` onto `target`: center shift in anchor units and
/// log size ratios.
pub fn encode(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    check_positive(anchor)?;
    check_positive(target)?;
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoxDelta {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: libm::log(target.width() / aw),
        dh: libm::log(target.height() / ah),
    })
}

/// Inverse of [`encode`]. When `clip_to` holds an image size the result is
/// clipped to `[0, w] x [0, h]`.
pub fn decode(anchor: &BBox, delta: &BoxDelta, clip_to: Option<(f64, f64)>) -> Result<BBox> {
    check_positive(anchor)?;
    if !delta.is_finite() {
        return Err(Error::NonFiniteDelta);
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * libm::exp(delta.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE));
    let h = ah * libm::exp(delta.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE));
    let b = BBox::from_center(cx, cy, w, h);
    if !b.is_valid() {
        return Err(Error::NonFiniteDelta);
    }
    Ok(match clip_to {
        Some((iw, ih)) => b.clip(iw, ih),
        None => b,
    })
}

/// Indices of `detections` sorted by descending score, equal scores keeping
/// input order.
pub fn score_order<T>(detections: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| score(&detections[j]).total_cmp(&score(&detections[i])));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; any two kept boxes overlap with IoU below `threshold`.
pub fn nms(detections: &[(BBox, f64)], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(detections, |d| d.1) {
        let candidate = &detections[i].0;
        if kept
            .iter()
            .all(|&k| iou(&detections[k].0, candidate) < threshold)
        {
            kept.push(i);
        }
    }
    kept
}
