//! Normalized bounding-box algebra.
//!
//! Boxes live in center-size form `(cx, cy, w, h)` with every field expressed
//! as a fraction of the image extent. Corner form is only ever a derived view.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Smallest width or height accepted by validation.
pub const MIN_EXTENT: f64 = 1e-6;

/// A box in normalized center-size coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner view `(x1, y1, x2, y2)` of a [`BoundingBox`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Build a validated box.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Build a box without validation. Loss code uses this for raw network
    /// outputs, which must not be clamped.
    pub const fn raw(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::raw(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fields = [self.cx, self.cy, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(fields));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(GeometryError::CenterOutOfRange(self.cx, self.cy));
        }
        if self.w < MIN_EXTENT || self.h < MIN_EXTENT || self.w > 1.0 || self.h > 1.0 {
            return Err(GeometryError::BadExtent(self.w, self.h));
        }
        Ok(())
    }

    pub fn to_corners(&self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn from_corners(c: CornerBox) -> Self {
        Self::raw(
            (c.x1 + c.x2) / 2.0,
            (c.y1 + c.y2) / 2.0,
            c.x2 - c.x1,
            c.y2 - c.y1,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clip the box to the unit square, keeping at least [`MIN_EXTENT`] of
    /// width and height. Used before prompting a segmenter or scoring, never
    /// inside a loss.
    pub fn clamped(&self) -> Self {
        let c = self.to_corners();
        let inside = |lo: f64, hi: f64| lo >= 0.0 && hi <= 1.0 && hi - lo >= 2.0 * MIN_EXTENT;
        if inside(c.x1, c.x2) && inside(c.y1, c.y2) {
            return *self;
        }
        let mut x1 = c.x1.clamp(0.0, 1.0);
        let mut y1 = c.y1.clamp(0.0, 1.0);
        let mut x2 = c.x2.clamp(0.0, 1.0);
        let mut y2 = c.y2.clamp(0.0, 1.0);
        // Collapsed extents are widened to twice the minimum so rounding in
        // the center-size conversion cannot push them back under it.
        if x2 - x1 < 2.0 * MIN_EXTENT {
            let mid = ((x1 + x2) / 2.0).clamp(MIN_EXTENT, 1.0 - MIN_EXTENT);
            x1 = mid - MIN_EXTENT;
            x2 = mid + MIN_EXTENT;
        }
        if y2 - y1 < 2.0 * MIN_EXTENT {
            let mid = ((y1 + y2) / 2.0).clamp(MIN_EXTENT, 1.0 - MIN_EXTENT);
            y1 = mid - MIN_EXTENT;
            y2 = mid + MIN_EXTENT;
        }
        Self::from_corners(CornerBox { x1, y1, x2, y2 })
    }
}

impl CornerBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

pub fn to_corners(b: &BoundingBox) -> Result<CornerBox, GeometryError> {
    b.validate()?;
    Ok(b.to_corners())
}

fn intersection(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

fn enclosing(a: &CornerBox, b: &CornerBox) -> f64 {
    (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))
}

/// IoU of two raw boxes, no validation. Symmetric by construction.
pub fn iou_raw(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over union of two validated boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_raw(a, b))
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`, in `(-1, 1]`.
pub fn generalized_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    generalized_iou_raw(a, b)
}

pub fn generalized_iou_raw(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let hull = enclosing(&ca, &cb);
    if !(hull > 0.0) || !(union > 0.0) {
        return Err(GeometryError::DegenerateEnclosing);
    }
    Ok(inter / union - (hull - union) / hull)
}

/// `1 - GIoU(pred, gt)`, in `[0, 2)`.
pub fn giou_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64, GeometryError> {
    Ok(1.0 - generalized_iou(pred, gt)?)
}

/// GIoU loss on a raw prediction together with its gradient with respect to
/// `(cx, cy, w, h)` of `pred`.
///
/// The prediction is not validated or clamped. At ties between the two boxes'
/// edges the prediction's edge is taken as the active one, which yields a valid
/// subgradient.
pub fn giou_loss_with_grad(
    pred: &BoundingBox,
    gt: &BoundingBox,
) -> Result<(f64, [f64; 4]), GeometryError> {
    let p = pred.to_corners();
    let g = gt.to_corners();

    let ix_hi = p.x2.min(g.x2);
    let ix_lo = p.x1.max(g.x1);
    let iy_hi = p.y2.min(g.y2);
    let iy_lo = p.y1.max(g.y1);
    let iw = (ix_hi - ix_lo).max(0.0);
    let ih = (iy_hi - iy_lo).max(0.0);
    let inter = iw * ih;

    let area_p = pred.w * pred.h;
    let area_g = gt.w * gt.h;
    let union = area_p + area_g - inter;

    let ew = p.x2.max(g.x2) - p.x1.min(g.x1);
    let eh = p.y2.max(g.y2) - p.y1.min(g.y1);
    let hull = ew * eh;
    if !(hull > 0.0) || !(union > 0.0) {
        return Err(GeometryError::DegenerateEnclosing);
    }
    let loss = 2.0 - inter / union - union / hull;

    // Partial derivatives with respect to the corner coordinates [x1, y1, x2, y2].
    let mut d_iw = [0.0; 4];
    let mut d_ih = [0.0; 4];
    if iw > 0.0 {
        if p.x2 <= g.x2 {
            d_iw[2] = 1.0;
        }
        if p.x1 >= g.x1 {
            d_iw[0] = -1.0;
        }
    }
    if ih > 0.0 {
        if p.y2 <= g.y2 {
            d_ih[3] = 1.0;
        }
        if p.y1 >= g.y1 {
            d_ih[1] = -1.0;
        }
    }
    let mut d_ew = [0.0; 4];
    let mut d_eh = [0.0; 4];
    if p.x2 >= g.x2 {
        d_ew[2] = 1.0;
    }
    if p.x1 <= g.x1 {
        d_ew[0] = -1.0;
    }
    if p.y2 >= g.y2 {
        d_eh[3] = 1.0;
    }
    if p.y1 <= g.y1 {
        d_eh[1] = -1.0;
    }
    // Area of pred in corner coordinates: (x2 - x1) * (y2 - y1).
    let d_area = [-(p.y2 - p.y1), -(p.x2 - p.x1), p.y2 - p.y1, p.x2 - p.x1];

    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area[k] - d_inter;
        let d_hull = d_ew[k] * eh + ew * d_eh[k];
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull) / (hull * hull);
        d_corner[k] = -d_iou - d_ratio;
    }

    // x1 = cx - w/2, x2 = cx + w/2 (same for y).
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        (d_corner[2] - d_corner[0]) / 2.0,
        (d_corner[3] - d_corner[1]) / 2.0,
    ];
    Ok((loss, grad))
}
