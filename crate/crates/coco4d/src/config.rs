//! Pipeline configuration: one JSON document with every stage's
//! hyperparameters, defaulting to the published values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::geometry::ScheduleConfig;

/// Per-attribute learning rates for Gaussian optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianLrs {
    pub feature: f64,
    pub position: f64,
    pub scaling: f64,
    pub opacity: f64,
    pub rotation: f64,
}

impl Default for GaussianLrs {
    fn default() -> Self {
        GaussianLrs {
            feature: 0.01,
            position: 0.001,
            scaling: 0.005,
            opacity: 0.05,
            rotation: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForegroundHyper {
    /// Static reconstruction iterations.
    pub static_iters: usize,
    /// Initial sphere point count for the static stage.
    pub init_points: usize,
    /// Motion-optimization iterations.
    pub motion_iters: usize,
    /// Timestamps per motion iteration.
    pub motion_batch: usize,
    pub lrs: GaussianLrs,
    pub deformation_lr: f64,
    pub trajectory_lr: f64,
    pub trajectory_iters: usize,
    pub densify_interval: usize,
    pub densify_threshold: f64,
    /// SDS weight w(gamma); constant by default.
    pub sds_weight: f64,
    pub rigidity_weight: f64,
    pub rigidity_k: usize,
    /// Azimuth interval in degrees for the SDS camera ring.
    pub sds_azimuth_interval: f64,
    /// Elevation jitter bound in degrees for sampled SDS cameras.
    pub sds_elevation_jitter: f64,
}

impl Default for ForegroundHyper {
    fn default() -> Self {
        ForegroundHyper {
            static_iters: 1000,
            init_points: 5000,
            motion_iters: 800,
            motion_batch: 4,
            lrs: GaussianLrs::default(),
            deformation_lr: 0.00064,
            trajectory_lr: 0.5,
            trajectory_iters: 50,
            densify_interval: 100,
            densify_threshold: 0.5,
            sds_weight: 1.0,
            rigidity_weight: 1.0,
            rigidity_k: 8,
            sds_azimuth_interval: 10.0,
            sds_elevation_jitter: 15.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundHyper {
    /// Static refinement iterations (init and per-view fusion).
    pub static_iters: usize,
    /// Dynamic-field iterations per trained camera pose.
    pub dynamic_iters_per_camera: usize,
    pub lrs: GaussianLrs,
    pub deformation_lr: f64,
    pub grid_lr: f64,
    /// Activated-scale cap.
    pub max_scale: f64,
    pub tv_weight: f64,
    pub sds_weight: f64,
    pub densify_interval: usize,
    pub densify_threshold: f64,
    /// Camera radius for background outpaint views.
    pub camera_radius: f64,
}

impl Default for BackgroundHyper {
    fn default() -> Self {
        BackgroundHyper {
            static_iters: 300,
            dynamic_iters_per_camera: 300,
            lrs: GaussianLrs::default(),
            deformation_lr: 0.0064,
            grid_lr: 0.064,
            max_scale: 0.2,
            tv_weight: 1e-4,
            sds_weight: 1.0,
            densify_interval: 100,
            densify_threshold: 0.5,
            camera_radius: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    /// Remote adapter endpoint; overridden by COCO4D_BACKENDS_URL.
    pub url: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: BackendMode::Mock,
            url: None,
        }
    }
}

/// How composed screen-space shifts are rescaled: scale each neighboring
/// interval, or apply the first interval's scaled step at every frame
/// (the alternative literal reading of the published recurrence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryRule {
    PerInterval,
    Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prompt: String,
    pub image_path: Option<String>,
    pub n_frames: usize,
    /// Resolution used for lifting / projection stages.
    pub projection_resolution: usize,
    /// Resolution of rendered outputs.
    pub output_resolution: usize,
    pub seed: u64,
    pub backends: BackendConfig,
    /// Video-inpainting strength.
    pub strength: f64,
    /// Upper bound of the uniform SDS noise-level range.
    pub sds_noise_ratio: f64,
    pub schedule: ScheduleConfig,
    pub foreground: ForegroundHyper,
    pub background: BackgroundHyper,
    pub trajectory_rule: TrajectoryRule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            prompt: "a scene".to_string(),
            image_path: None,
            n_frames: 16,
            projection_resolution: 256,
            output_resolution: 256,
            seed: 0,
            backends: BackendConfig::default(),
            strength: 0.7,
            sds_noise_ratio: 0.5,
            schedule: ScheduleConfig::default(),
            foreground: ForegroundHyper::default(),
            background: BackgroundHyper::default(),
            trajectory_rule: TrajectoryRule::PerInterval,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(CocoError::InvalidConfig("prompt must be non-empty".into()));
        }
        if self.n_frames < 2 {
            return Err(CocoError::InvalidConfig("n_frames must be >= 2".into()));
        }
        if self.projection_resolution == 0 || self.output_resolution == 0 {
            return Err(CocoError::InvalidConfig("resolutions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(CocoError::InvalidConfig(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        if !(self.sds_noise_ratio > 0.0 && self.sds_noise_ratio <= 1.0) {
            return Err(CocoError::InvalidConfig(format!(
                "sds_noise_ratio {} outside (0, 1]",
                self.sds_noise_ratio
            )));
        }
        for (name, v) in [
            ("foreground.static_iters", self.foreground.static_iters),
            ("foreground.motion_iters", self.foreground.motion_iters),
            ("foreground.motion_batch", self.foreground.motion_batch),
            ("foreground.trajectory_iters", self.foreground.trajectory_iters),
            ("background.static_iters", self.background.static_iters),
            (
                "background.dynamic_iters_per_camera",
                self.background.dynamic_iters_per_camera,
            ),
        ] {
            if v == 0 {
                return Err(CocoError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.background.max_scale <= 0.0 {
            return Err(CocoError::InvalidConfig("background.max_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CocoError::Load(format!("{}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CocoError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.n_frames, 16);
        assert_eq!(c.projection_resolution, 256);
        assert_eq!(c.strength, 0.7);
        assert_eq!(c.sds_noise_ratio, 0.5);
        let lrs = &c.foreground.lrs;
        assert_eq!(
            (lrs.feature, lrs.position, lrs.scaling, lrs.opacity, lrs.rotation),
            (0.01, 0.001, 0.005, 0.05, 0.005)
        );
        assert_eq!(c.foreground.static_iters, 1000);
        assert_eq!(c.foreground.motion_iters, 800);
        assert_eq!(c.foreground.motion_batch, 4);
        assert_eq!(c.foreground.deformation_lr, 0.00064);
        assert_eq!(c.foreground.trajectory_lr, 0.5);
        assert_eq!(c.foreground.trajectory_iters, 50);
        assert_eq!(c.foreground.densify_interval, 100);
        assert_eq!(c.background.static_iters, 300);
        assert_eq!(c.background.dynamic_iters_per_camera, 300);
        assert_eq!(c.background.deformation_lr, 0.0064);
        assert_eq!(c.background.grid_lr, 0.064);
        assert_eq!(c.background.max_scale, 0.2);
        assert_eq!(c.background.densify_threshold, 0.5);
        c.check().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = PipelineConfig::default();
        c.strength = 1.5;
        assert!(c.check().is_err());
        let mut c = PipelineConfig::default();
        c.prompt.clear();
        assert!(c.check().is_err());
        let mut c = PipelineConfig::default();
        c.foreground.motion_batch = 0;
        assert!(c.check().is_err());
    }

    #[test]
    fn json_round_trip_and_partial_overrides() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"prompt": "hills", "seed": 9, "n_frames": 8}"#).unwrap();
        assert_eq!(c.prompt, "hills");
        assert_eq!(c.seed, 9);
        assert_eq!(c.n_frames, 8);
        assert_eq!(c.strength, 0.7);
        let text = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.prompt, c.prompt);
        assert_eq!(back.foreground.deformation_lr, c.foreground.deformation_lr);
    }
}
