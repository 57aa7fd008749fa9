//! JSON run configuration.

use std::path::PathBuf;

use atoken::fmcore::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_NUM_STAGES, KITTI_CAMERA_HEIGHT};
use atoken::{CameraIntrinsics, PipelineConfig};
use serde::{Deserialize, Serialize};

/// Keys mirror [`PipelineConfig`]; `camera` supplies intrinsics for
/// `--input` runs and `scorer_weights` points at an ATSW file for the
/// semantic scorer. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub num_stages: Option<usize>,
    #[serde(default)]
    pub token_schedule: Option<Vec<usize>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub d_k: Option<usize>,
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub num_heads: Option<usize>,
    #[serde(default)]
    pub normalize_positions: Option<bool>,
    #[serde(default)]
    pub camera: Option<CameraIntrinsics>,
    #[serde(default)]
    pub scorer_weights: Option<PathBuf>,
}

pub const DEFAULT_D_K: usize = 16;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Resolves defaults against a map of `num_pixels` pixels. A missing
    /// schedule shrinks the token count by a factor of four per stage.
    pub fn pipeline_config(&self, num_pixels: usize) -> Result<PipelineConfig, String> {
        let schedule = match (&self.token_schedule, self.num_stages) {
            (Some(s), Some(n)) if s.len() != n => {
                return Err(format!(
                    "num_stages is {n} but token_schedule has {} entries",
                    s.len()
                ))
            }
            (Some(s), _) => s.clone(),
            (None, n) => {
                PipelineConfig::quarter_schedule(num_pixels, n.unwrap_or(DEFAULT_NUM_STAGES))
            }
        };
        let cfg = PipelineConfig {
            num_stages: schedule.len(),
            token_schedule: schedule,
            alpha: self.alpha.unwrap_or(DEFAULT_ALPHA),
            beta: self.beta.unwrap_or(DEFAULT_BETA),
            d_k: self.d_k.unwrap_or(DEFAULT_D_K),
            rng_seed: self.rng_seed.unwrap_or(0),
            mlp_hidden: self.mlp_hidden,
            num_heads: self.num_heads.unwrap_or(1),
            normalize_positions: self.normalize_positions.unwrap_or(true),
        };
        cfg.validate(num_pixels).map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Camera for maps without their own intrinsics: the configured one, or a
    /// focal length equal to the map width with the horizon a quarter of the
    /// way down.
    pub fn camera_for(&self, width: usize, height: usize) -> Result<CameraIntrinsics, String> {
        match self.camera {
            Some(k) => k.validate().map(|_| k).map_err(|e| e.to_string()),
            None => CameraIntrinsics::new(
                width as f64,
                width as f64,
                width as f64 / 2.0 - 0.5,
                (height as f64 * 0.25).floor() - 0.5,
                KITTI_CAMERA_HEIGHT,
            )
            .map_err(|e| e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"num_stages": 3, "gamma": 1}"#).is_err());
        assert!(RunConfig::from_json(
            r#"{"camera": {"fx":1,"fy":1,"cx":0,"cy":0,"cam_height":1,"zoom":2}}"#
        )
        .is_err());
    }

    #[test]
    fn defaults_use_quarter_schedule() {
        let cfg = RunConfig::from_json("{}")
            .unwrap()
            .pipeline_config(1024)
            .unwrap();
        assert_eq!(cfg.token_schedule, vec![256, 64, 16]);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 0.05);
        assert!(cfg.normalize_positions);
    }

    #[test]
    fn schedule_bounds_checked() {
        let rc = RunConfig::from_json(r#"{"token_schedule": [65, 16, 4]}"#).unwrap();
        assert!(rc.pipeline_config(64).is_err());
        let rc =
            RunConfig::from_json(r#"{"token_schedule": [64, 16, 4], "num_stages": 2}"#).unwrap();
        assert!(rc.pipeline_config(64).is_err());
        let rc = RunConfig::from_json(r#"{"token_schedule": [64, 16, 4]}"#).unwrap();
        assert_eq!(rc.pipeline_config(64).unwrap().num_stages, 3);
    }
}
