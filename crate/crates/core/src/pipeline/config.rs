use serde::{Deserialize, Serialize};

use crate::cspok::OkmConfig;
use crate::error::{Error, Result};
use crate::losses::{FocalParams, Reduction, VflParams};

/// Strides produced by the backbone, shallowest first.
pub const BACKBONE_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsLoss {
    Vfl,
    Focal,
    Bce,
}

impl std::str::FromStr for ClsLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vfl" => Ok(ClsLoss::Vfl),
            "focal" => Ok(ClsLoss::Focal),
            "bce" => Ok(ClsLoss::Bce),
            other => Err(Error::Config(format!("unknown classification loss {other:?} (vfl, focal, bce)"))),
        }
    }
}

impl std::fmt::Display for ClsLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClsLoss::Vfl => "vfl",
            ClsLoss::Focal => "focal",
            ClsLoss::Bce => "bce",
        })
    }
}

/// Everything that determines the network and its loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Widths of stem, P2, P3, P4, P5.
    pub widths: [usize; 5],
    pub head_hidden: usize,
    pub spd_enabled: bool,
    /// Stage whose input downsampling becomes SPD (2..=5); 3 replaces the P2 to P3 step.
    pub spd_stage: usize,
    pub spd_kernel: usize,
    /// Neck fusion units carry the omni-kernel operator.
    pub cspok_enabled: bool,
    pub okm: OkmConfig,
    pub strides: Vec<usize>,
    pub cls_loss: ClsLoss,
    pub vfl: VflParams,
    pub focal: FocalParams,
    pub cls_weight: f64,
    pub box_weight: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            in_channels: 3,
            num_classes: 3,
            widths: [8, 16, 24, 32, 48],
            head_hidden: 16,
            spd_enabled: true,
            spd_stage: 3,
            spd_kernel: 3,
            cspok_enabled: true,
            okm: OkmConfig::default(),
            strides: BACKBONE_STRIDES.to_vec(),
            cls_loss: ClsLoss::Vfl,
            vfl: VflParams::default(),
            focal: FocalParams {
                reduction: Reduction::Sum,
                ..FocalParams::default()
            },
            cls_weight: 0.5,
            box_weight: 7.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Plain backbone and neck with BCE classification.
    pub fn baseline() -> Self {
        ModelConfig {
            spd_enabled: false,
            cspok_enabled: false,
            cls_loss: ClsLoss::Bce,
            ..ModelConfig::default()
        }
    }

    pub fn max_stride(&self) -> usize {
        BACKBONE_STRIDES[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.max_stride()) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of the largest stride {}",
                self.input_size,
                self.max_stride()
            )));
        }
        if self.strides.is_empty() {
            return Err(Error::Config("at least one head stride is required".into()));
        }
        for w in self.strides.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!("head strides must increase, got {:?}", self.strides)));
            }
        }
        if let Some(s) = self.strides.iter().find(|s| !BACKBONE_STRIDES.contains(s)) {
            return Err(Error::Config(format!("head stride {s} not produced by the backbone (8, 16, 32)")));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.head_hidden == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if self.widths.iter().any(|&w| w < 2) {
            return Err(Error::Config(format!("stage widths must be at least 2, got {:?}", self.widths)));
        }
        if !(2..=5).contains(&self.spd_stage) {
            return Err(Error::Config(format!("spd_stage must be in 2..=5, got {}", self.spd_stage)));
        }
        if self.spd_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("spd_kernel must be odd, got {}", self.spd_kernel)));
        }
        for (name, w) in [("cls_weight", self.cls_weight), ("box_weight", self.box_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        self.okm.validate()?;
        self.vfl.validate()?;
        Ok(())
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.strides.iter().map(|s| self.input_size / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_grids_follow_strides() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid_sizes(), vec![16, 8, 4]);
    }

    #[test]
    fn size_must_divide_by_largest_stride() {
        let c = ModelConfig {
            input_size: 120,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            strides: vec![16, 8],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            strides: vec![4],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_selector_parses() {
        assert_eq!("focal".parse::<ClsLoss>().unwrap(), ClsLoss::Focal);
        assert!("mse".parse::<ClsLoss>().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        assert!(json.contains("\"cls_loss\":\"vfl\""));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"spd_enabled": false}"#).unwrap();
        assert!(!c.spd_enabled);
        assert_eq!(c.input_size, 128);
    }
}
