//! Normalized boxes, overlap measures and the two box regression losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smallest width or height a box may carry.
pub const MIN_EXTENT: f32 = 1e-6;

/// Box in normalized center format, all fields in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxN {
    /// Validates the ranges and clamps widths and heights below
    /// [`MIN_EXTENT`] up to it.
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        let fields = [cx, cy, w, h];
        if fields.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!("box ({cx}, {cy}, {w}, {h}) outside [0,1]^4")));
        }
        Ok(BoxN { cx, cy, w: w.max(MIN_EXTENT), h: h.max(MIN_EXTENT) })
    }

    /// The whole image.
    pub fn full() -> Self {
        BoxN { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 }
    }

    /// Builds a box from corners, clipping them to the unit square first.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        if x2 < x1 || y2 < y1 {
            return Err(Error::Contract(format!("inverted corners ({x1}, {y1}, {x2}, {y2})")));
        }
        BoxN::new(
            ((x1 + x2) / 2.0) as f32,
            ((y1 + y2) / 2.0) as f32,
            (x2 - x1) as f32,
            (y2 - y1) as f32,
        )
    }

    /// `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> (f64, f64, f64, f64) {
        let (cx, cy, w, h) = (self.cx as f64, self.cy as f64, self.w as f64, self.h as f64);
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Ordered boxes of one image. Matchings refer to positions in `boxes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub image_id: String,
    pub boxes: Vec<BoxN>,
}

impl BoxSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BoxN>) -> Self {
        BoxSet { image_id: image_id.into(), boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `[len × 4]` tensor of `(cx, cy, w, h)` rows.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.boxes.iter().flat_map(BoxN::to_array).collect();
        Tensor::new(vec![self.boxes.len(), 4], data).expect("4 values per box")
    }
}

fn intersection(a: &BoxN, b: &BoxN) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

pub fn iou(a: &BoxN, b: &BoxN) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Row-major `N×N` IoU matrix of one box set.
pub fn pairwise_iou(s: &BoxSet) -> Vec<f64> {
    let n = s.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = iou(&s.boxes[i], &s.boxes[j]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

pub fn giou(a: &BoxN, b: &BoxN) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enclosing - union) / enclosing
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss(a: &BoxN, b: &BoxN) -> f64 {
    1.0 - giou(a, b)
}

/// Sum of absolute coordinate differences over `(cx, cy, w, h)`.
pub fn l1_coord_loss(a: &BoxN, b: &BoxN) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (*x as f64 - y as f64).abs()).sum()
}

/// Per-row L1 coordinate loss between two `[M×4]` box tensors, as an `[M]`
/// vector on the tape.
pub fn l1_coord_loss_rows(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    tape.row_sums(a)
}

/// Per-row GIoU loss between two `[M×4]` box tensors in center format, as an
/// `[M]` vector on the tape.
pub fn giou_loss_rows(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (m, c) = tape.value(pred).dims2()?;
    if c != 4 || tape.value(target).shape() != [m, 4] {
        return Err(Error::Shape(format!(
            "giou needs two [M x 4] box tensors, got {:?} and {:?}",
            tape.value(pred).shape(),
            tape.value(target).shape()
        )));
    }
    let pa = corners(tape, pred)?;
    let pb = corners(tape, target)?;

    let ix1 = tape.maximum(pa.x1, pb.x1)?;
    let iy1 = tape.maximum(pa.y1, pb.y1)?;
    let ix2 = tape.minimum(pa.x2, pb.x2)?;
    let iy2 = tape.minimum(pa.y2, pb.y2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let sum_area = tape.add(pa.area, pb.area)?;
    let union = tape.sub(sum_area, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.minimum(pa.x1, pb.x1)?;
    let ey1 = tape.minimum(pa.y1, pb.y1)?;
    let ex2 = tape.maximum(pa.x2, pb.x2)?;
    let ey2 = tape.maximum(pa.y2, pb.y2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;

    let slack = tape.sub(enclosing, union)?;
    let penalty = tape.div(slack, enclosing)?;
    let giou = tape.sub(iou, penalty)?;
    let neg = tape.scale(giou, -1.0);
    let loss = tape.add_scalar(neg, 1.0);
    let flat = tape.row_sums(loss)?;
    Ok(flat)
}

struct CornerVars {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
    area: Var,
}

fn corners(tape: &mut Tape, b: Var) -> Result<CornerVars> {
    let cx = tape.slice_cols(b, 0, 1)?;
    let cy = tape.slice_cols(b, 1, 2)?;
    let w = tape.slice_cols(b, 2, 3)?;
    let h = tape.slice_cols(b, 3, 4)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    Ok(CornerVars {
        x1: tape.sub(cx, hw)?,
        y1: tape.sub(cy, hh)?,
        x2: tape.add(cx, hw)?,
        y2: tape.add(cy, hh)?,
        area: tape.mul(w, h)?,
    })
}
