//! COCO-format I/O and COCO-style box evaluation: greedy per-image matching,
//! 101-point interpolated AP, the 0.50:0.05:0.95 IoU sweep and area buckets.

mod ap;
mod coco;
mod evaluate;
mod matching;
mod types;

pub use ap::{average_precision, recall_thresholds};
pub use coco::{load_coco, load_detections, save_detections, CocoAnnotation, CocoCategory, CocoDataset, CocoDetection, CocoImage};
pub use evaluate::{evaluate, evaluate_with, iou_thresholds, AreaRange, ClassAp, EvalParams, EvalResult};
pub use matching::{match_detections, DetectionMatch, MatchSummary};
pub use types::{BoxAnnotation, Detection};
