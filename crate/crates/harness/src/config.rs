use crate::HarnessError;
use jenga_core::force::{ForceConfig, ThresholdSchedule};
use jenga_core::geometry::{CameraIntrinsics, KinematicChain};
use jenga_core::perception::{MaskNoise, TrackNoise};
use jenga_core::policy::PolicyConfig;
use jenga_core::servo::{ServoConfig, ServoGoal};
use jenga_core::tower::TowerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub intrinsics: CameraIntrinsics,
    pub masks: MaskNoise,
    pub tracking: TrackNoise,
}

/// Arm kinematics and the camera/finger mounting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub chain: KinematicChain,
    pub goal: ServoGoal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameMode {
    /// Approach outcomes are sampled from the failure rates below.
    #[default]
    Fast,
    /// Every approach runs the closed visual-servo loop.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub mode: GameMode,
    /// Safety stop on the number of attempts in one game.
    pub max_attempts: usize,
    /// Chance that an approach to a level within `edge_margin` of the
    /// workspace limits ends in a singularity.
    pub p_singularity_edge: f64,
    pub edge_margin: usize,
    /// Chance per approach that tracking is lost.
    pub p_tracking_loss: f64,
    /// Chance per approach that the first pose estimate is unusable.
    pub p_bad_init: f64,
    /// Std of the contact point offset per axis in fast mode (m).
    pub contact_sigma: f64,
    /// Camera-to-face distance at the start of an approach (m), and the
    /// half-width of its random spread.
    pub approach_distance: f64,
    pub approach_spread: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            mode: GameMode::Fast,
            max_attempts: 400,
            p_singularity_edge: 0.1,
            edge_margin: 1,
            p_tracking_loss: 0.1,
            p_bad_init: 0.04,
            contact_sigma: 0.0004,
            approach_distance: 0.26,
            approach_spread: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub force_blocks: usize,
    pub tracking_levels: Vec<usize>,
    /// Tower rotation rates (deg/s).
    pub tracking_rates: Vec<f64>,
    pub tracking_duration_s: f64,
    pub tracking_arc_deg: f64,
    pub tracking_distance: f64,
    pub tracking_trials: usize,
    pub servo_trials: usize,
    pub seg_images: usize,
    pub iou_thresholds: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            force_blocks: 15,
            tracking_levels: vec![5, 6, 8, 9, 10, 11],
            tracking_rates: vec![2.5, 8.3],
            tracking_duration_s: 60.0,
            tracking_arc_deg: 45.0,
            tracking_distance: 0.3,
            tracking_trials: 10,
            servo_trials: 21,
            seg_images: 12,
            iou_thresholds: vec![0.5, 0.8, 0.9],
        }
    }
}

/// Every tunable of a run, one TOML table per section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tower: TowerConfig,
    pub force: ForceConfig,
    pub policy: PolicyConfig,
    pub perception: PerceptionConfig,
    pub robot: RobotConfig,
    pub servo: ServoConfig,
    pub game: GameConfig,
    pub bench: BenchConfig,
}

fn invalid(msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(msg.to_string())
}

fn probability(name: &str, p: f64) -> Result<(), HarnessError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in [0, 1]")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(invalid)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.tower.validate().map_err(invalid)?;
        self.force.validate().map_err(invalid)?;
        ThresholdSchedule::new(self.policy.thr_aggressive, self.policy.thr_conservative).map_err(invalid)?;
        self.perception.intrinsics.validate().map_err(invalid)?;
        self.servo.validate().map_err(invalid)?;
        self.robot.chain.validate().map_err(invalid)?;
        if !(self.robot.goal.finger_length > 0.0 && self.robot.goal.standoff >= 0.0) {
            return Err(invalid("finger length must be positive and standoff non-negative"));
        }
        let g = &self.game;
        probability("game.p_singularity_edge", g.p_singularity_edge)?;
        probability("game.p_tracking_loss", g.p_tracking_loss)?;
        probability("game.p_bad_init", g.p_bad_init)?;
        probability("perception.masks.dropout", self.perception.masks.dropout)?;
        if g.max_attempts == 0 {
            return Err(invalid("game.max_attempts must be positive"));
        }
        if !(g.contact_sigma >= 0.0) {
            return Err(invalid("game.contact_sigma must be non-negative"));
        }
        if !(g.approach_distance > 0.0) || !(g.approach_spread >= 0.0) || g.approach_spread >= g.approach_distance {
            return Err(invalid("game approach distance must be positive and exceed its spread"));
        }
        let t = &self.perception.tracking;
        if !(t.dt > 0.0) || !(t.err_thr_deg > 0.0) || !(t.point_density > 0.0) {
            return Err(invalid("tracking dt, err_thr_deg and point_density must be positive"));
        }
        let b = &self.bench;
        if b.tracking_rates.iter().any(|w| !(*w > 0.0)) || !(b.tracking_duration_s > 0.0) {
            return Err(invalid("tracking bench rates and duration must be positive"));
        }
        if b.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(invalid("IoU thresholds must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Short hash identifying the full configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        let mut other = cfg.clone();
        other.servo.lambda = 0.6;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[servo]\nlambda_typo = 1.0\n"), Err(HarnessError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nonsense]\n"), Err(HarnessError::Config(_))));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("[policy]\nstart = \"low\"\n").unwrap();
        assert_eq!(cfg.tower, TowerConfig::default());
        assert_eq!(cfg.policy.start, jenga_core::policy::StartChoice::Low);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[servo]\nlambda = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[game]\np_tracking_loss = 1.5\n").is_err());
    }
}
