//! Four-arm ablation: baseline, +SPD, +SPD+CSPOK, +SPD+CSPOK+VFL, each trained
//! under identical seeds and budgets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ClsLoss, ModelConfig};
use super::model::build_model;
use super::synth::{small_target_ratio, Dataset};
use super::train::{train_demo, TrainConfig};
use crate::error::{Error, Result};
use crate::ENGINE_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: &'static str,
    pub spd_enabled: bool,
    pub cspok_enabled: bool,
    pub cls_loss: ClsLoss,
}

/// The arms in report order. Arms without VFL use BCE on the same soft IoU targets.
pub const ARMS: [Arm; 4] = [
    Arm { name: "baseline", spd_enabled: false, cspok_enabled: false, cls_loss: ClsLoss::Bce },
    Arm { name: "+SPD", spd_enabled: true, cspok_enabled: false, cls_loss: ClsLoss::Bce },
    Arm { name: "+SPD+CSPOK", spd_enabled: true, cspok_enabled: true, cls_loss: ClsLoss::Bce },
    Arm { name: "+SPD+CSPOK+VFL", spd_enabled: true, cspok_enabled: true, cls_loss: ClsLoss::Vfl },
];

impl Arm {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            spd_enabled: self.spd_enabled,
            cspok_enabled: self.cspok_enabled,
            cls_loss: self.cls_loss,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub map_50: f64,
    pub map_50_95: f64,
    pub ap_small: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub spd_enabled: bool,
    pub cspok_enabled: bool,
    pub cls_loss: ClsLoss,
    pub param_count: usize,
    /// Means over seeds.
    pub map_50: f64,
    pub map_50_95: f64,
    /// Absent when the held-out split has no small targets.
    pub ap_small: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub annotations: usize,
    pub small_ratio: f64,
    /// SHA-256 over the annotation JSON and every image's bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub engine_version: String,
    /// SHA-256 of the base model config, training config, seeds and dataset hash.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub optimizer: String,
    pub dataset: DatasetSummary,
    pub base_model: ModelConfig,
    pub train: TrainConfig,
    pub rows: Vec<ArmResult>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset_hash(dataset: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(dataset.coco.to_json_string()?.as_bytes());
    for img in &dataset.images {
        h.update(img.to_ppm());
    }
    Ok(hex(&h.finalize()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains every arm for every seed. `base.seed` is replaced by each seed in turn.
pub fn ablate(dataset: &Dataset, base: &ModelConfig, train: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let data_hash = dataset_hash(dataset)?;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&(base, train, seeds, &data_hash))?.as_bytes());
    let config_hash = hex(&h.finalize());
    let mut rows = Vec::with_capacity(ARMS.len());
    for arm in &ARMS {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut param_count = 0;
        for &seed in seeds {
            let cfg = ModelConfig { seed, ..arm.apply(base) };
            param_count = build_model(&cfg)?.param_count();
            log::info!("ablate: arm {} seed {seed}", arm.name);
            let out = train_demo(&cfg, dataset, train)?;
            per_seed.push(SeedResult {
                seed,
                map_50: out.final_eval.map_50,
                map_50_95: out.final_eval.map_50_95,
                ap_small: out.final_eval.ap_small,
                final_loss: out.history.last().map(|r| r.loss),
            });
        }
        let ap_small = per_seed
            .iter()
            .map(|s| s.ap_small)
            .collect::<Option<Vec<f64>>>()
            .map(|v| mean(v.into_iter()));
        rows.push(ArmResult {
            name: arm.name.to_string(),
            spd_enabled: arm.spd_enabled,
            cspok_enabled: arm.cspok_enabled,
            cls_loss: arm.cls_loss,
            param_count,
            map_50: mean(per_seed.iter().map(|s| s.map_50)),
            map_50_95: mean(per_seed.iter().map(|s| s.map_50_95)),
            ap_small,
            per_seed,
        });
    }
    Ok(AblationReport {
        engine_version: ENGINE_VERSION.to_string(),
        config_hash,
        seeds: seeds.to_vec(),
        epochs: train.epochs,
        optimizer: train.optimizer_label(),
        dataset: DatasetSummary {
            images: dataset.len(),
            annotations: dataset.coco.annotations.len(),
            small_ratio: small_target_ratio(&dataset.coco),
            sha256: data_hash,
        },
        base_model: base.clone(),
        train: train.clone(),
        rows,
    })
}

impl AblationReport {
    /// Aligned table, one row per arm, plus the AP_small change of the full
    /// model over the baseline.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut out = format!("{:<16}  {:>6}  {:>9}  {:>8}\n", "model", "mAP.5", "mAP.5:.95", "AP_small");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16}  {:>6}  {:>9}  {:>8}\n",
                r.name,
                fmt(Some(r.map_50)),
                fmt(Some(r.map_50_95)),
                fmt(r.ap_small)
            ));
        }
        if let (Some(first), Some(last)) = (self.rows.first(), self.rows.last()) {
            if let (Some(a), Some(b)) = (first.ap_small, last.ap_small) {
                out.push_str(&format!("AP_small change, full vs baseline: {:+.3}\n", b - a));
            }
        }
        out
    }
}
