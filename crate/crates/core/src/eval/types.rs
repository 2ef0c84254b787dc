use serde::{Deserialize, Serialize};

use crate::boxes::Bbox;

/// A ground-truth box. `area` drives the size buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Bbox,
    pub area: f64,
}

impl BoxAnnotation {
    /// Annotation whose area is the box area.
    pub fn new(image_id: u64, category_id: u64, bbox: Bbox) -> Self {
        BoxAnnotation {
            image_id,
            category_id,
            bbox,
            area: bbox.area(),
        }
    }
}

/// A scored predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Bbox,
    pub score: f64,
}
