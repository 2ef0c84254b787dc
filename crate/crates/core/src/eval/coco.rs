use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{BoxAnnotation, Detection};
use crate::boxes::Bbox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

/// A COCO instances file restricted to boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl CocoDataset {
    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let ds: CocoDataset = serde_json::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
        ds.validate(context)?;
        Ok(ds)
    }

    /// Checks unique ids, referential integrity and positive box extents.
    pub fn validate(&self, context: &str) -> Result<()> {
        let mut image_ids = BTreeSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::parse(context, format!("duplicate image id {}", img.id)));
            }
        }
        let mut cat_ids = BTreeSet::new();
        for cat in &self.categories {
            if !cat_ids.insert(cat.id) {
                return Err(Error::parse(context, format!("duplicate category id {}", cat.id)));
            }
        }
        for ann in &self.annotations {
            if !image_ids.contains(&ann.image_id) {
                return Err(Error::parse(
                    context,
                    format!("annotation {} references unknown image_id {}", ann.id, ann.image_id),
                ));
            }
            if !cat_ids.contains(&ann.category_id) {
                return Err(Error::parse(
                    context,
                    format!("annotation {} references unknown category_id {}", ann.id, ann.category_id),
                ));
            }
            let [x, y, w, h] = ann.bbox;
            if ![x, y, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
                return Err(Error::parse(
                    context,
                    format!("annotation {} has non-positive box extent {:?}", ann.id, ann.bbox),
                ));
            }
            if let Some(a) = ann.area {
                if !(a.is_finite() && a >= 0.0) {
                    return Err(Error::parse(context, format!("annotation {} has invalid area {a}", ann.id)));
                }
            }
        }
        Ok(())
    }

    /// Compact, deterministic JSON.
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    /// Ground truth as evaluator input; `area` falls back to `w * h`.
    pub fn box_annotations(&self) -> Vec<BoxAnnotation> {
        self.annotations
            .iter()
            .map(|a| {
                let bbox = Bbox::from_xywh(a.bbox);
                BoxAnnotation {
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox,
                    area: a.area.unwrap_or(a.bbox[2] * a.bbox[3]),
                }
            })
            .collect()
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<BoxAnnotation>> {
        let mut out: BTreeMap<u64, Vec<BoxAnnotation>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in self.box_annotations() {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }

    /// `(images, annotations, categories)`
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.images.len(), self.annotations.len(), self.categories.len())
    }
}

pub fn load_coco(path: impl AsRef<Path>) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CocoDataset::from_json_str(&text, &path.display().to_string())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<CocoDetection> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, d)| {
            if !d.score.is_finite() {
                return Err(Error::parse(path.display().to_string(), format!("detection {i} has non-finite score")));
            }
            let bbox = Bbox::from_xywh(d.bbox);
            bbox.validate()
                .map_err(|e| Error::parse(path.display().to_string(), format!("detection {i}: {e}")))?;
            Ok(Detection {
                image_id: d.image_id,
                category_id: d.category_id,
                bbox,
                score: d.score,
            })
        })
        .collect()
}

pub fn save_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<CocoDetection> = dets
        .iter()
        .map(|d| CocoDetection {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&raw)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "file_name": "a.ppm", "width": 32, "height": 32}],
        "annotations": [{"id": 7, "image_id": 1, "category_id": 3, "bbox": [1, 2, 4, 5]}],
        "categories": [{"id": 3, "name": "beetle"}]
    }"#;

    #[test]
    fn minimal_file_counts() {
        let ds = CocoDataset::from_json_str(MINIMAL, "minimal").unwrap();
        assert_eq!(ds.counts(), (1, 1, 1));
        let gts = ds.box_annotations();
        assert_eq!(gts[0].area, 20.0);
        assert_eq!(gts[0].bbox, Bbox::new(1.0, 2.0, 5.0, 7.0));
    }

    #[test]
    fn dangling_image_reference_rejected() {
        let text = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 9");
        let err = CocoDataset::from_json_str(&text, "bad").unwrap_err().to_string();
        assert!(err.contains("annotation 7") && err.contains("image_id 9"), "{err}");
    }

    #[test]
    fn dangling_category_and_bad_extent_rejected() {
        let text = MINIMAL.replace("\"category_id\": 3", "\"category_id\": 4");
        assert!(CocoDataset::from_json_str(&text, "bad").is_err());
        let text = MINIMAL.replace("[1, 2, 4, 5]", "[1, 2, 0, 5]");
        let err = CocoDataset::from_json_str(&text, "bad").unwrap_err().to_string();
        assert!(err.contains("annotation 7"), "{err}");
    }

    #[test]
    fn missing_key_is_parse_error() {
        let text = r#"{"images": [], "annotations": []}"#;
        assert!(matches!(CocoDataset::from_json_str(text, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn explicit_area_overrides_box_area() {
        let text = MINIMAL.replace("[1, 2, 4, 5]", "[1, 2, 4, 5], \"area\": 11.5");
        let ds = CocoDataset::from_json_str(&text, "x").unwrap();
        assert_eq!(ds.box_annotations()[0].area, 11.5);
    }
}
