//! Normalized box and point algebra: conversions, IoU/GIoU, L1 distance and
//! horizontal-flip transforms.
//!
//! All coordinates live in the unit square. Boxes are stored in center form
//! (`cx, cy, w, h`); the corner form is computed on demand for overlap math.

use crate::error::{Error, Result};

/// A 2D point in `[0,1]²`, expressed as fractions of image width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y))
        {
            return Err(Error::InvalidPoint(format!("({x}, {y}) outside [0,1]²")));
        }
        Ok(Self { x, y })
    }
}

/// Center-format box with normalized coordinates. `w` and `h` are strictly
/// positive; the corner form may stick out of the unit square until clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box (`x1 < x2`, `y1 < y2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCCWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite ({cx},{cy},{w},{h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("degenerate w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Clamp the corner form to the unit square, keeping `w,h >= floor`.
    pub fn clamp_to_unit(self, floor: f64) -> BoxCCWH {
        let c = self.to_corners();
        let x1 = c.x1.clamp(0.0, 1.0);
        let y1 = c.y1.clamp(0.0, 1.0);
        let x2 = c.x2.clamp(0.0, 1.0);
        let y2 = c.y2.clamp(0.0, 1.0);
        let w = (x2 - x1).max(floor);
        let h = (y2 - y1).max(floor);
        BoxCCWH {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w,
            h,
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        let c = self.to_corners();
        p.x >= c.x1 && p.x <= c.x2 && p.y >= c.y1 && p.y <= c.y2
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite ({x1},{y1},{x2},{y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!(
                "corners not ordered ({x1},{y1})..({x2},{y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Center form to corner form.
pub fn to_corners(b: BoxCCWH) -> BoxXYXY {
    BoxXYXY {
        x1: b.cx - 0.5 * b.w,
        y1: b.cy - 0.5 * b.h,
        x2: b.cx + 0.5 * b.w,
        y2: b.cy + 0.5 * b.h,
    }
}

/// Corner form to center form.
pub fn from_corners(b: BoxXYXY) -> BoxCCWH {
    BoxCCWH {
        cx: 0.5 * (b.x1 + b.x2),
        cy: 0.5 * (b.y1 + b.y2),
        w: b.x2 - b.x1,
        h: b.y2 - b.y1,
    }
}

impl BoxCCWH {
    pub fn to_corners(self) -> BoxXYXY {
        to_corners(self)
    }
}

/// Intersection area of two corner-form boxes.
fn intersection(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Intersection over union, in `[0,1]`.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: `iou - (hull - union) / hull`, in `(-1, 1]`.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hull_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hull_w * hull_h;
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// Mirror a point across the vertical axis of the unit square.
pub fn hflip_point(p: Point2) -> Point2 {
    Point2 {
        x: 1.0 - p.x,
        y: p.y,
    }
}

/// Mirror a box across the vertical axis of the unit square.
pub fn hflip_box(b: BoxCCWH) -> BoxCCWH {
    BoxCCWH {
        cx: 1.0 - b.cx,
        cy: b.cy,
        w: b.w,
        h: b.h,
    }
}

/// Sum of absolute coordinate differences in center form.
pub fn l1_box(a: &BoxCCWH, b: &BoxCCWH) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}
