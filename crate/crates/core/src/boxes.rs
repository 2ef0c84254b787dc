//! Axis-aligned boxes in corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x_min, y_min, x_max, y_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Bbox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Bbox { x_min, y_min, x_max, y_max }
    }

    /// From COCO `[x, y, width, height]`.
    pub fn from_xywh([x, y, w, h]: [f64; 4]) -> Self {
        Bbox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Bbox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    /// Rejects inverted or non-finite coordinates.
    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite box {a:?}")));
        }
        if self.x_max < self.x_min || self.y_max < self.y_min {
            return Err(Error::Domain(format!("inverted box {a:?}")));
        }
        Ok(())
    }
}

/// Intersection over union without validation. Zero-area unions give 0.
pub fn iou_unchecked(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection over union in `[0, 1]`.
pub fn iou(a: &Bbox, b: &Bbox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}
