//! Desk-scale anchor-free detector: model, target assignment, decoding,
//! synthetic data, training and the four-arm ablation.

mod ablate;
mod assign;
mod config;
mod decode;
mod model;
mod synth;
mod train;

pub use ablate::{ablate, dataset_hash, AblationReport, Arm, ArmResult, DatasetSummary, SeedResult, ARMS};
pub use assign::{assign_targets, level_for, level_grids, GtBox, LevelGrid, PointTarget};
pub use config::{ClsLoss, ModelConfig, BACKBONE_STRIDES};
pub use decode::{decode_and_nms, decode_boxes, decode_level, decode_points, nms, Candidate, DecodeParams};
pub use model::{build_model, Conv, Downsample, Head, Layout, LevelOutput, Model, Network};
pub use synth::{generate_synthetic, single_target_dataset, small_target_ratio, Dataset, RgbImage, SynthSpec, ANNOTATIONS_FILE, MIN_SMALL_RATIO, SMALL_AREA};
pub use train::{build_targets, detection_loss, detection_loss_with_targets, BatchTargets, LevelPositives, evaluate_model, loss_and_gradients, train_demo, EpochRecord, LossParts, TrainConfig, TrainOutcome};
pub use crate::eval::{BoxAnnotation, Detection};
