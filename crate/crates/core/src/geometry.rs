//! Normalized bounding boxes, IoU / GIoU, and the box regression distance.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::{Scalar, Tape, Tensor, Var};

/// Weight of the `1 - GIoU` term inside [`box_distance`]. With the outer box
/// weight of 5 this yields the usual 5·L1 + 2·(1 − GIoU).
pub const GIOU_WEIGHT: f64 = 0.4;

/// Axis-aligned box in center form, normalized to the image size.
///
/// Serializes as the JSON array `[cx, cy, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`, unclamped.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Corner form clamped to the unit square.
    pub fn clamped_corners(self) -> [f64; 4] {
        let [x1, y1, x2, y2] = self.corners();
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x1, x2) = (c(x1), c(x2));
        let (y1, y2) = (c(y1), c(y2));
        [x1, y1, x2.max(x1), y2.max(y1)]
    }

    pub fn clamped(self) -> Self {
        let [x1, y1, x2, y2] = self.clamped_corners();
        Self::from_corners(x1, y1, x2, y2)
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Valid: positive size, center inside, extent inside the unit square.
    pub fn is_valid(self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        let eps = 1e-9;
        self.w > 0.0
            && self.h > 0.0
            && x1 >= -eps
            && y1 >= -eps
            && x2 <= 1.0 + eps
            && y2 <= 1.0 + eps
    }

    pub fn translated(self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

fn inter_union_enclose(a: BoundingBox, b: BoundingBox) -> (f64, f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    (inter, union, cw.max(0.0) * ch.max(0.0))
}

pub fn iou(a: BoundingBox, b: BoundingBox) -> f64 {
    let (inter, union, _) = inter_union_enclose(a, b);
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, in `(-1, 1]`.
pub fn giou(a: BoundingBox, b: BoundingBox) -> f64 {
    let (inter, union, enclose) = inter_union_enclose(a, b);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclose <= 0.0 {
        return iou;
    }
    iou - (enclose - union.max(0.0)) / enclose
}

/// Sum of absolute coordinate differences in center form.
pub fn l1(a: BoundingBox, b: BoundingBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// `L1(a, b) + 0.4 · (1 − GIoU(a, b))`.
pub fn box_distance(a: BoundingBox, b: BoundingBox) -> f64 {
    box_distance_with(a, b, GIOU_WEIGHT)
}

/// `L1(a, b) + giou_weight · (1 − GIoU(a, b))`.
pub fn box_distance_with(a: BoundingBox, b: BoundingBox, giou_weight: f64) -> f64 {
    l1(a, b) + giou_weight * (1.0 - giou(a, b))
}

/// Per-row [`box_distance_with`] between two `[m, 4]` box tensors on a tape.
///
/// Differentiable with respect to both inputs almost everywhere.
pub fn box_distance_rows<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var, giou_weight: f64) -> Result<Var> {
    let l1 = tape.sum_last(tape.abs(tape.sub(pred, target)?));
    let g = giou_rows(tape, pred, target)?;
    let penalty = tape.affine(g, -giou_weight, giou_weight);
    tape.add(l1, penalty)
}

/// Per-row GIoU between two `[m, 4]` center-form box tensors.
pub fn giou_rows<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    let col = |v: Var, i: usize| -> Result<Var> {
        Ok(tape.sum_last(tape.slice_last(v, i, 1)?))
    };
    let corners = |v: Var| -> Result<[Var; 4]> {
        let (cx, cy, w, h) = (col(v, 0)?, col(v, 1)?, col(v, 2)?, col(v, 3)?);
        let (hw, hh) = (tape.scale(w, 0.5), tape.scale(h, 0.5));
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    };
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area = |x1: Var, y1: Var, x2: Var, y2: Var| -> Result<Var> {
        let w = tape.relu(tape.sub(x2, x1)?);
        let h = tape.relu(tape.sub(y2, y1)?);
        tape.mul(w, h)
    };
    let area_a = area(ax1, ay1, ax2, ay2)?;
    let area_b = area(bx1, by1, bx2, by2)?;
    let inter = area(
        tape.maximum(ax1, bx1)?,
        tape.maximum(ay1, by1)?,
        tape.minimum(ax2, bx2)?,
        tape.minimum(ay2, by2)?,
    )?;
    let enclose = area(
        tape.minimum(ax1, bx1)?,
        tape.minimum(ay1, by1)?,
        tape.maximum(ax2, bx2)?,
        tape.maximum(ay2, by2)?,
    )?;
    let tiny = tape.scalar(1e-12);
    let union = tape.sub(tape.add(area_a, area_b)?, inter)?;
    let union_safe = tape.maximum(union, tiny)?;
    let enclose_safe = tape.maximum(enclose, tiny)?;
    let iou = tape.div(inter, union_safe)?;
    let gap = tape.div(tape.sub(enclose, union)?, enclose_safe)?;
    tape.sub(iou, gap)
}

/// Stack boxes into a `[n, 4]` tensor.
pub fn boxes_tensor<T: Scalar>(boxes: &[BoundingBox]) -> Tensor<T> {
    let flat: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
    Tensor::from_f64_slice(&[boxes.len(), 4], &flat).expect("n x 4")
}
