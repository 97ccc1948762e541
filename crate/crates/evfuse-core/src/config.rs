//! Pipeline configuration shared by the CLI subcommands.
//!
//! Defaults are the operating constants: B = 4 bins, theta_hot = 500 Hz,
//! theta_dens = 5, a 30 ms window, CLAHE tiles M = 8 with clip limit 2.0,
//! confidence threshold 0.1, NMS threshold 0.4, and evaluation IoU 0.4.
//! Anchor templates have no published values; the defaults here are sized
//! for the bundled fixtures and are expected to be tuned per dataset.

use serde::{Deserialize, Serialize};

use crate::detect::Anchor;
use crate::enhance::ClaheParams;
use crate::error::{Error, Result};
use crate::voxel::VoxelParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub window: WindowConfig,
    pub voxel: VoxelConfig,
    pub clahe: ClaheConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub t0_us: u64,
    pub dt_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelConfig {
    pub bins: usize,
    pub theta_hot_hz: f64,
    pub theta_dens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheConfig {
    pub tiles: usize,
    pub clip_limit: f64,
    pub gray_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub tau_conf: f64,
    pub tau_nms: f64,
    pub anchors: Vec<Anchor>,
    /// Pixels per cell for each pyramid scale the head emits; each must be a
    /// power of two. Single-scale fixtures use the first entry.
    pub strides: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            t0_us: 0,
            dt_us: 30_000,
        }
    }
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            bins: 4,
            theta_hot_hz: 500.0,
            theta_dens: 5.0,
        }
    }
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig {
            tiles: 8,
            clip_limit: 2.0,
            gray_levels: 256,
        }
    }
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            tau_conf: 0.1,
            tau_nms: 0.4,
            anchors: vec![
                Anchor { w: 24.0, h: 48.0 },
                Anchor { w: 48.0, h: 48.0 },
                Anchor { w: 96.0, h: 64.0 },
            ],
            strides: vec![8],
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_thresh: 0.4 }
    }
}

impl PipelineConfig {
    /// Parse a JSON config and validate every field, reporting violations
    /// with their field path.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            location: crate::error::Location::Line(e.line()),
            message: format!("config JSON: {e}"),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serialize");
        bytes.push(b'\n');
        bytes
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel.bins < 2 {
            return Err(Error::invalid(format!(
                "voxel.bins: must be >= 2 (event-count conservation requires two bins), got {}",
                self.voxel.bins
            )));
        }
        if !self.voxel.theta_hot_hz.is_finite() || self.voxel.theta_hot_hz <= 0.0 {
            return Err(Error::invalid("voxel.theta_hot_hz: must be finite and > 0"));
        }
        if !self.voxel.theta_dens.is_finite() || self.voxel.theta_dens < 0.0 {
            return Err(Error::invalid("voxel.theta_dens: must be finite and >= 0"));
        }
        if self.window.dt_us == 0 {
            return Err(Error::invalid("window.dt_us: must be > 0"));
        }
        let clahe = ClaheParams {
            tile_grid: self.clahe.tiles,
            clip_limit: self.clahe.clip_limit,
            gray_levels: self.clahe.gray_levels,
        };
        clahe
            .validate()
            .map_err(|e| Error::invalid(format!("clahe: {e}")))?;
        if !(0.0..=1.0).contains(&self.detect.tau_conf) {
            return Err(Error::invalid("detect.tau_conf: must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.detect.tau_nms) {
            return Err(Error::invalid("detect.tau_nms: must lie in [0, 1]"));
        }
        if self.detect.anchors.is_empty() {
            return Err(Error::invalid("detect.anchors: must not be empty"));
        }
        for (i, a) in self.detect.anchors.iter().enumerate() {
            a.validate()
                .map_err(|e| Error::invalid(format!("detect.anchors[{i}]: {e}")))?;
        }
        if self.detect.strides.is_empty() {
            return Err(Error::invalid("detect.strides: must not be empty"));
        }
        for (i, &s) in self.detect.strides.iter().enumerate() {
            if s == 0 || !s.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "detect.strides[{i}]: must be a positive power of two, got {s}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            return Err(Error::invalid("eval.iou_thresh: must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn voxel_params(&self) -> VoxelParams {
        VoxelParams {
            bins: self.voxel.bins,
            theta_dens: self.voxel.theta_dens,
        }
    }

    pub fn clahe_params(&self) -> ClaheParams {
        ClaheParams {
            tile_grid: self.clahe.tiles,
            clip_limit: self.clahe.clip_limit,
            gray_levels: self.clahe.gray_levels,
        }
    }
}
