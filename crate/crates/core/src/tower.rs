//! Jenga tower state: block layout with manufacturing tolerances, load
//! sharing within layers, friction-derived push forces, extraction and
//! restacking, and collapse detection.
//!
//! Tower frame: origin at the centre of the base footprint, z up. Level `L`
//! (1 = bottom) spans `z in [(L-1) h, L h]`. Blocks in an orientation-0 layer
//! have their long axis along x and sit side by side along y; orientation-90
//! layers swap the two.

use crate::geometry::{rot_z, RigidPose, Vec3};
use crate::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub const GRAVITY: f64 = 9.81;
/// Force sensor sample period (20 Hz).
pub const SAMPLE_PERIOD: f64 = 0.05;
pub const SAMPLE_RATE_HZ: f64 = 20.0;

pub type BlockId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TowerError {
    #[error("invalid tower configuration: {0}")]
    InvalidConfig(String),
    #[error("tower has collapsed")]
    CollapsedTower,
    #[error("block {0} is already extracted")]
    AlreadyExtracted(BlockId),
    #[error("block {0} has not been extracted")]
    NotExtracted(BlockId),
    #[error("block {0} was already placed on top")]
    AlreadyPlaced(BlockId),
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("level {0} does not exist")]
    InvalidLevel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for BlockDims {
    fn default() -> Self {
        BlockDims {
            length: 0.075,
            width: 0.025,
            height: 0.015,
        }
    }
}

impl BlockDims {
    pub fn validate(&self) -> Result<(), TowerError> {
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(TowerError::InvalidConfig("block dimensions must be positive".into()));
        }
        if (self.length - 3.0 * self.width).abs() > 1e-9 {
            return Err(TowerError::InvalidConfig(
                "block length must be three times its width".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerConfig {
    pub levels: usize,
    pub block: BlockDims,
    /// kg
    pub block_mass: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Bound on the signed height deviation of each block (m).
    pub tolerance_bound: f64,
    /// Blocks within this height of the tallest block of their layer carry load (m).
    pub contact_epsilon: f64,
    /// Mean and spread of the load kept by non-bearing blocks (N).
    pub residual_load: f64,
    pub residual_sigma: f64,
    pub residual_min: f64,
    pub residual_max: f64,
    /// Normal load at which contact friction starts to saturate (N).
    pub load_saturation: f64,
    /// Time for the reaction force to build up after contact (s).
    pub ramp_time: f64,
    pub sensor_sigma: f64,
    pub sensor_full_scale: f64,
    pub sensor_resolution: f64,
    /// 0 or 90 degrees; orientation of the bottom level.
    pub base_orientation_deg: u32,
    /// Accumulated disturbance the tower tolerates before falling, drawn per tower.
    pub capacity_mean: f64,
    pub capacity_sigma: f64,
    pub capacity_min: f64,
    /// Disturbance from removing a block, plus a term per newton of its friction plateau.
    pub extraction_disturbance: f64,
    pub loaded_extraction_gain: f64,
    /// Disturbance per newton of peak force of an aborted push.
    pub push_disturbance_gain: f64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            levels: 18,
            block: BlockDims::default(),
            block_mass: 0.018,
            mu_min: 0.2,
            mu_max: 0.45,
            tolerance_bound: 2e-4,
            contact_epsilon: 2e-5,
            residual_load: 0.05,
            residual_sigma: 0.01,
            residual_min: 0.02,
            residual_max: 0.1,
            load_saturation: 1.1,
            ramp_time: 0.2,
            sensor_sigma: 0.005,
            sensor_full_scale: 5.0,
            sensor_resolution: 0.002,
            base_orientation_deg: 0,
            capacity_mean: 10.5,
            capacity_sigma: 3.0,
            capacity_min: 1.0,
            extraction_disturbance: 1.0,
            loaded_extraction_gain: 1.0,
            push_disturbance_gain: 0.3,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<(), TowerError> {
        let bad = |m: &str| Err(TowerError::InvalidConfig(m.into()));
        if self.levels < 3 {
            return bad("at least 3 levels are required");
        }
        self.block.validate()?;
        if !(self.block_mass > 0.0) {
            return bad("block mass must be positive");
        }
        if !(self.mu_min > 0.0 && self.mu_min <= self.mu_max) {
            return bad("friction range must satisfy 0 < mu_min <= mu_max");
        }
        if !(self.tolerance_bound >= 0.0 && self.contact_epsilon >= 0.0) {
            return bad("tolerance bound and contact epsilon must be non-negative");
        }
        if !(self.residual_min >= 0.0 && self.residual_min <= self.residual_max && self.residual_sigma >= 0.0) {
            return bad("residual load range is invalid");
        }
        if !(self.load_saturation > 0.0 && self.ramp_time >= 0.0) {
            return bad("load saturation must be positive and ramp time non-negative");
        }
        if !(self.sensor_sigma >= 0.0 && self.sensor_full_scale > 0.0 && self.sensor_resolution > 0.0) {
            return bad("sensor parameters are invalid");
        }
        if self.base_orientation_deg != 0 && self.base_orientation_deg != 90 {
            return bad("base orientation must be 0 or 90");
        }
        if !(self.capacity_sigma >= 0.0 && self.capacity_min > 0.0) {
            return bad("stability capacity parameters are invalid");
        }
        if !(self.extraction_disturbance >= 0.0 && self.loaded_extraction_gain >= 0.0 && self.push_disturbance_gain >= 0.0)
        {
            return bad("disturbance gains must be non-negative");
        }
        Ok(())
    }

    /// Weight of one block (N).
    pub fn block_weight(&self) -> f64 {
        self.block_mass * GRAVITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockStatus {
    Present,
    Tested,
    Extracted,
}

impl BlockStatus {
    /// Still physically in its slot.
    pub fn in_tower(self) -> bool {
        !matches!(self, BlockStatus::Extracted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Deg0,
    Deg90,
}

impl Orientation {
    pub fn rotated(self) -> Self {
        match self {
            Orientation::Deg0 => Orientation::Deg90,
            Orientation::Deg90 => Orientation::Deg0,
        }
    }

    pub fn yaw(self) -> f64 {
        match self {
            Orientation::Deg0 => 0.0,
            Orientation::Deg90 => FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub level: usize,
    pub slot: usize,
    pub status: BlockStatus,
    /// Signed deviation from nominal height (m).
    pub height_tolerance: f64,
    pub mu_top: f64,
    pub mu_bottom: f64,
    /// Load kept when the block is not one of the tallest in its layer (N).
    pub residual_load: f64,
    /// Id of the record created when this block was restacked on top.
    pub relocated_to: Option<BlockId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    Stable,
    Collapsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CollapseCause {
    /// A non-top layer lost its support.
    UnsupportedLayer { level: usize },
    /// A push went above its threshold without aborting.
    UnabortedPush { block: BlockId },
    /// Accumulated disturbance exceeded the tower's capacity.
    Instability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerState {
    pub config: TowerConfig,
    /// `layers[L - 1]` holds the three slots of level `L`.
    pub layers: Vec<[Option<BlockId>; 3]>,
    pub blocks: Vec<Block>,
    pub base_orientation: Orientation,
    pub collapsed: bool,
    pub collapse_cause: Option<CollapseCause>,
    pub seed: u64,
    /// `extracted_count[L - 1]` for level `L`.
    pub extracted_count: Vec<u32>,
    pub disturbance: f64,
    pub capacity: f64,
}

/// Force samples at 20 Hz: `samples[k] = (k * 0.05 s, f_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrace {
    pub samples: Vec<(f64, f64)>,
    pub contact_start: usize,
}

impl ForceTrace {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(0.0, f64::max)
    }
}

pub fn new_tower(config: &TowerConfig, seed: u64) -> Result<TowerState, TowerError> {
    config.validate()?;
    let mut rng = stream_rng(seed, crate::rng::stream::TOWER);
    let residual_noise = Normal::new(0.0, config.residual_sigma).expect("sigma validated");
    let mut blocks = Vec::with_capacity(config.levels * 3);
    let mut layers = Vec::with_capacity(config.levels);
    for level in 1..=config.levels {
        let mut layer = [None; 3];
        for (slot, entry) in layer.iter_mut().enumerate() {
            let id = blocks.len();
            blocks.push(sample_block(config, &mut rng, &residual_noise, id, level, slot));
            *entry = Some(id);
        }
        layers.push(layer);
    }
    let capacity_noise = Normal::new(0.0, config.capacity_sigma).expect("sigma validated");
    let capacity = (config.capacity_mean + capacity_noise.sample(&mut rng)).max(config.capacity_min);
    Ok(TowerState {
        config: config.clone(),
        extracted_count: vec![0; layers.len()],
        layers,
        blocks,
        base_orientation: if config.base_orientation_deg == 90 {
            Orientation::Deg90
        } else {
            Orientation::Deg0
        },
        collapsed: false,
        collapse_cause: None,
        seed,
        disturbance: 0.0,
        capacity,
    })
}

fn sample_block(
    config: &TowerConfig,
    rng: &mut ChaCha8Rng,
    residual_noise: &Normal<f64>,
    id: BlockId,
    level: usize,
    slot: usize,
) -> Block {
    let b = config.tolerance_bound;
    let height_tolerance = if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let mu_top = rng.random_range(config.mu_min..=config.mu_max);
    let mu_bottom = rng.random_range(config.mu_min..=config.mu_max);
    let residual_load = (config.residual_load + residual_noise.sample(rng)).clamp(config.residual_min, config.residual_max);
    Block {
        id,
        level,
        slot,
        status: BlockStatus::Present,
        height_tolerance,
        mu_top,
        mu_bottom,
        residual_load,
        relocated_to: None,
    }
}

impl TowerState {
    pub fn level_count(&self) -> usize {
        self.layers.len()
    }

    pub fn block(&self, id: BlockId) -> Result<&Block, TowerError> {
        self.blocks.get(id).ok_or(TowerError::UnknownBlock(id))
    }

    pub fn orientation(&self, level: usize) -> Orientation {
        if level % 2 == 1 {
            self.base_orientation
        } else {
            self.base_orientation.rotated()
        }
    }

    /// Ids of blocks still physically in level `level`.
    pub fn present_in_level(&self, level: usize) -> Vec<BlockId> {
        match self.layers.get(level.wrapping_sub(1)) {
            Some(layer) => layer
                .iter()
                .flatten()
                .copied()
                .filter(|&id| self.blocks[id].status.in_tower())
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn slot_present(&self, level: usize, slot: usize) -> bool {
        self.layers
            .get(level.wrapping_sub(1))
            .and_then(|l| l[slot])
            .is_some_and(|id| self.blocks[id].status.in_tower())
    }

    /// Whether the level has three blocks placed (regardless of later extractions).
    pub fn level_complete(&self, level: usize) -> bool {
        self.layers
            .get(level.wrapping_sub(1))
            .is_some_and(|l| l.iter().all(Option::is_some))
    }

    /// Highest level whose three slots were all filled at some point.
    pub fn top_complete_level(&self) -> usize {
        (1..=self.level_count()).rev().find(|&l| self.level_complete(l)).unwrap_or(0)
    }

    /// Pose of a block in the tower frame: x along its long axis, y across,
    /// z up, origin at the block centre.
    pub fn block_pose(&self, id: BlockId) -> Result<RigidPose, TowerError> {
        let b = self.block(id)?;
        Ok(self.slot_pose(b.level, b.slot))
    }

    pub fn slot_pose(&self, level: usize, slot: usize) -> RigidPose {
        let dims = &self.config.block;
        let yaw = self.orientation(level).yaw();
        let across = (slot as f64 - 1.0) * dims.width;
        let local = Vec3::new(0.0, across, (level as f64 - 0.5) * dims.height);
        let r = rot_z(yaw);
        RigidPose {
            rotation: r,
            translation: r * local,
        }
    }

    /// Total weight of the blocks resting above `level` (N).
    pub fn weight_above(&self, level: usize) -> f64 {
        let count: usize = (level + 1..=self.level_count()).map(|l| self.present_in_level(l).len()).sum();
        count as f64 * self.config.block_weight()
    }

    fn check_level(&self, level: usize) -> Result<(), TowerError> {
        if level == 0 || level > self.level_count() {
            Err(TowerError::InvalidLevel(level))
        } else {
            Ok(())
        }
    }

    fn ensure_standing(&self) -> Result<(), TowerError> {
        if self.collapsed {
            Err(TowerError::CollapsedTower)
        } else {
            Ok(())
        }
    }

    /// Blocks of `level` that are within contact epsilon of the tallest one.
    pub fn bearing_blocks(&self, level: usize) -> Vec<BlockId> {
        let present = self.present_in_level(level);
        let max = present
            .iter()
            .map(|&id| self.blocks[id].height_tolerance)
            .fold(f64::NEG_INFINITY, f64::max);
        present
            .into_iter()
            .filter(|&id| self.blocks[id].height_tolerance >= max - self.config.contact_epsilon)
            .collect()
    }

    /// Normal load from above carried by each slot of `level` (N); 0 for empty slots.
    pub fn load_distribution(&self, level: usize) -> Result<[f64; 3], TowerError> {
        self.ensure_standing()?;
        self.check_level(level)?;
        let mut out = [0.0; 3];
        let w = self.weight_above(level);
        let present = self.present_in_level(level);
        if w <= 0.0 || present.is_empty() {
            return Ok(out);
        }
        let bearing = self.bearing_blocks(level);
        let even = w / present.len() as f64;
        let mut loose_total = 0.0;
        for &id in &present {
            if !bearing.contains(&id) {
                let b = &self.blocks[id];
                let share = b.residual_load.min(even);
                out[b.slot] = share;
                loose_total += share;
            }
        }
        let bearing_share = (w - loose_total) / bearing.len() as f64;
        for &id in &bearing {
            out[self.blocks[id].slot] = bearing_share;
        }
        Ok(out)
    }

    pub fn is_load_bearing(&self, id: BlockId) -> Result<bool, TowerError> {
        let b = self.block(id)?;
        Ok(b.status.in_tower() && self.weight_above(b.level) > 0.0 && self.bearing_blocks(b.level).contains(&id))
    }

    /// Steady friction force opposing a push of block `id` (N).
    ///
    /// Coulomb friction on the top and bottom faces, with the normal load
    /// passed through a saturating contact law `N_s (1 - exp(-N / N_s))`.
    pub fn plateau_force(&self, id: BlockId) -> Result<f64, TowerError> {
        self.ensure_standing()?;
        let b = self.block(id)?;
        if !b.status.in_tower() {
            return Err(TowerError::AlreadyExtracted(id));
        }
        let load = self.load_distribution(b.level)?[b.slot];
        let ns = self.config.load_saturation;
        Ok((b.mu_top + b.mu_bottom) * ns * (1.0 - (-load / ns).exp()))
    }

    /// Sensor reading of the reaction force while pushing `id` at
    /// `push_speed` for `duration` seconds, contact at t = 0.
    pub fn reaction_force_profile(
        &self,
        id: BlockId,
        push_speed: f64,
        duration: f64,
        seed: u64,
    ) -> Result<ForceTrace, TowerError> {
        let plateau = self.plateau_force(id)?;
        let cfg = &self.config;
        let n = if duration > 0.0 {
            (duration * SAMPLE_RATE_HZ + 1e-9).floor() as usize
        } else {
            0
        };
        let mut rng = stream_rng(seed, crate::rng::stream::FORCE);
        let noise = Normal::new(0.0, cfg.sensor_sigma).expect("sigma validated");
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let t = k as f64 * SAMPLE_PERIOD;
            let pushed = push_speed * t;
            let ideal = if pushed >= cfg.block.length {
                0.0
            } else if cfg.ramp_time > 0.0 {
                plateau * (t / cfg.ramp_time).min(1.0)
            } else {
                plateau
            };
            let raw = (ideal + noise.sample(&mut rng)).clamp(0.0, cfg.sensor_full_scale);
            let quantized = (raw / cfg.sensor_resolution).round() * cfg.sensor_resolution;
            samples.push((t, quantized.min(cfg.sensor_full_scale)));
        }
        Ok(ForceTrace {
            samples,
            contact_start: 0,
        })
    }

    pub fn mark_tested(&mut self, id: BlockId) -> Result<(), TowerError> {
        self.ensure_standing()?;
        let b = self.blocks.get_mut(id).ok_or(TowerError::UnknownBlock(id))?;
        match b.status {
            BlockStatus::Extracted => Err(TowerError::AlreadyExtracted(id)),
            _ => {
                b.status = BlockStatus::Tested;
                Ok(())
            }
        }
    }

    /// Books the disturbance of a push that stopped before extraction. A push
    /// that exceeded its threshold without aborting knocks the tower over.
    pub fn record_push(&mut self, id: BlockId, peak: f64, threshold: f64, aborted: bool) -> Result<Stability, TowerError> {
        self.ensure_standing()?;
        self.block(id)?;
        if !aborted && peak >= threshold {
            self.collapse(CollapseCause::UnabortedPush { block: id });
            return Ok(Stability::Collapsed);
        }
        self.disturbance += self.config.push_disturbance_gain * peak;
        Ok(self.check_capacity())
    }

    /// Removes `id` from its slot and re-checks stability.
    pub fn apply_extraction(&mut self, id: BlockId) -> Result<Stability, TowerError> {
        self.ensure_standing()?;
        let b = self.block(id)?;
        if b.status == BlockStatus::Extracted {
            return Err(TowerError::AlreadyExtracted(id));
        }
        let plateau = self.plateau_force(id)?;
        let level = self.blocks[id].level;
        self.blocks[id].status = BlockStatus::Extracted;
        self.extracted_count[level - 1] += 1;
        if self.stability_check() == Stability::Collapsed {
            return Ok(Stability::Collapsed);
        }
        self.disturbance += self.config.extraction_disturbance + self.config.loaded_extraction_gain * plateau;
        Ok(self.check_capacity())
    }

    fn check_capacity(&mut self) -> Stability {
        if self.disturbance > self.capacity {
            self.collapse(CollapseCause::Instability);
            Stability::Collapsed
        } else {
            Stability::Stable
        }
    }

    fn collapse(&mut self, cause: CollapseCause) {
        self.collapsed = true;
        self.collapse_cause = Some(cause);
    }

    /// Restacks an extracted block in the next free slot on top. Returns the
    /// id of the new record.
    pub fn place_extracted_on_top(&mut self, id: BlockId) -> Result<BlockId, TowerError> {
        self.ensure_standing()?;
        let b = self.block(id)?.clone();
        if b.status != BlockStatus::Extracted {
            return Err(TowerError::NotExtracted(id));
        }
        if b.relocated_to.is_some() {
            return Err(TowerError::AlreadyPlaced(id));
        }
        let top_full = self.layers.last().is_none_or(|l| l.iter().all(Option::is_some));
        if top_full {
            self.layers.push([None; 3]);
            self.extracted_count.push(0);
        }
        let level = self.layers.len();
        let slot = self.layers[level - 1].iter().position(Option::is_none).expect("top layer has room");
        let new_id = self.blocks.len();
        self.blocks.push(Block {
            id: new_id,
            level,
            slot,
            status: BlockStatus::Present,
            relocated_to: None,
            ..b
        });
        self.layers[level - 1][slot] = Some(new_id);
        self.blocks[id].relocated_to = Some(new_id);
        Ok(new_id)
    }

    /// Support rule: every layer below the top must keep its centre block or
    /// both side blocks.
    pub fn stability_check(&mut self) -> Stability {
        if self.collapsed {
            return Stability::Collapsed;
        }
        let top = self.level_count();
        for level in 1..top {
            let centre = self.slot_present(level, 1);
            let sides = self.slot_present(level, 0) && self.slot_present(level, 2);
            if !(centre || sides) {
                self.collapse(CollapseCause::UnsupportedLayer { level });
                return Stability::Collapsed;
            }
        }
        Stability::Stable
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tower(levels: usize) -> TowerState {
        new_tower(
            &TowerConfig {
                levels,
                ..Default::default()
            },
            42,
        )
        .unwrap()
    }

    fn id_at(t: &TowerState, level: usize, slot: usize) -> BlockId {
        t.layers[level - 1][slot].unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = TowerConfig::default();
        assert_eq!(new_tower(&cfg, 42).unwrap(), new_tower(&cfg, 42).unwrap());
        assert_ne!(new_tower(&cfg, 42).unwrap(), new_tower(&cfg, 43).unwrap());
    }

    #[test]
    fn sixteen_levels_hold_48_blocks() {
        assert_eq!(tower(16).blocks.len(), 48);
        assert_eq!(tower(18).blocks.len(), 54);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TowerConfig { levels: 2, ..Default::default() },
            TowerConfig { mu_min: 0.5, mu_max: 0.4, ..Default::default() },
            TowerConfig { base_orientation_deg: 45, ..Default::default() },
            TowerConfig {
                block: BlockDims { length: 0.07, ..Default::default() },
                ..Default::default()
            },
        ] {
            assert!(matches!(new_tower(&cfg, 1), Err(TowerError::InvalidConfig(_))));
        }
    }

    #[test]
    fn sampled_parameters_respect_bounds() {
        let cfg = TowerConfig::default();
        for seed in 0..50 {
            let t = new_tower(&cfg, seed).unwrap();
            for b in &t.blocks {
                assert!(b.height_tolerance.abs() <= 2e-4);
                assert!((cfg.mu_min..=cfg.mu_max).contains(&b.mu_top));
                assert!((cfg.mu_min..=cfg.mu_max).contains(&b.mu_bottom));
            }
        }
    }

    #[test]
    fn orientations_alternate() {
        let t = tower(6);
        for l in 1..6 {
            assert_ne!(t.orientation(l), t.orientation(l + 1));
        }
        let a = t.slot_pose(1, 0).rotation.column(0).into_owned();
        let b = t.slot_pose(2, 0).rotation.column(0).into_owned();
        assert!(a.dot(&b).abs() < 1e-12);
    }

    #[test]
    fn top_layer_carries_nothing() {
        let t = tower(18);
        assert_eq!(t.load_distribution(18).unwrap(), [0.0; 3]);
    }

    #[test]
    fn tall_centre_block_carries_the_weight_above() {
        let mut t = tower(11);
        for slot in 0..3 {
            let id = id_at(&t, 1, slot);
            t.blocks[id].height_tolerance = if slot == 1 { 1e-4 } else { -1e-4 };
        }
        let loads = t.load_distribution(1).unwrap();
        let w = 10.0 * 3.0 * 0.018 * 9.81;
        let r0 = t.blocks[id_at(&t, 1, 0)].residual_load;
        let r2 = t.blocks[id_at(&t, 1, 2)].residual_load;
        assert_relative_eq!(loads[1], w - r0 - r2, epsilon = 1e-12);
        assert!((loads[1] - 5.3).abs() < 0.2);
        assert_eq!(loads[0], r0);
        assert_eq!(loads[2], r2);
    }

    #[test]
    fn loads_are_conserved_in_every_layer() {
        for seed in 0..20 {
            let t = new_tower(&TowerConfig::default(), seed).unwrap();
            for level in 1..=t.level_count() {
                let sum: f64 = t.load_distribution(level).unwrap().iter().sum();
                assert!((sum - t.weight_above(level)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unloaded_and_loaded_profiles() {
        let t = tower(18);
        let level = 9;
        let bearing = t.bearing_blocks(level);
        for id in t.present_in_level(level) {
            let trace = t.reaction_force_profile(id, 0.005, 3.0, 7).unwrap();
            assert_eq!(trace.len(), 60);
            let late = trace.samples[10..].iter().map(|s| s.1).fold(0.0, f64::max);
            if bearing.contains(&id) {
                let p = t.plateau_force(id).unwrap();
                assert!(p > 0.32 && p <= 1.0, "plateau {p}");
                assert!(late > 0.3);
            } else {
                assert!(trace.samples.iter().all(|s| s.1 < 0.18));
            }
        }
    }

    #[test]
    fn trace_contract() {
        let t = tower(18);
        let id = id_at(&t, 5, 1);
        assert!(t.reaction_force_profile(id, 0.005, 0.0, 1).unwrap().is_empty());
        let trace = t.reaction_force_profile(id, 0.005, 20.0, 1).unwrap();
        assert_eq!(trace, t.reaction_force_profile(id, 0.005, 20.0, 1).unwrap());
        for (k, &(time, f)) in trace.samples.iter().enumerate() {
            assert_eq!(time, k as f64 * SAMPLE_PERIOD);
            assert!((0.0..=5.0).contains(&f));
            let steps = f / 0.002;
            assert!((steps - steps.round()).abs() < 1e-6);
        }
        // The block leaves its slot after one length of travel.
        assert!(trace.samples.last().unwrap().1 < 0.03);
    }

    #[test]
    fn lower_levels_never_push_easier() {
        // Same layer pattern and friction at every level: plateau grows downwards.
        let mut t = tower(18);
        for b in t.blocks.iter_mut() {
            b.height_tolerance = if b.slot == 1 { 1e-4 } else { -1e-4 };
            b.mu_top = 0.3;
            b.mu_bottom = 0.3;
        }
        let mut prev = f64::INFINITY;
        for level in 1..=18 {
            let p = t.plateau_force(id_at(&t, level, 1)).unwrap();
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn support_rule_table() {
        // Side block out, centre + other side in: stands.
        let mut t = tower(6);
        assert_eq!(t.apply_extraction(id_at(&t, 3, 0)).unwrap(), Stability::Stable);
        // Centre out after both sides: falls.
        let mut t = tower(6);
        let id = id_at(&t, 3, 0);
        t.blocks[id].status = BlockStatus::Extracted;
        let id = id_at(&t, 3, 2);
        t.blocks[id].status = BlockStatus::Extracted;
        assert_eq!(t.apply_extraction(id_at(&t, 3, 1)).unwrap(), Stability::Collapsed);
        assert_eq!(t.collapse_cause, Some(CollapseCause::UnsupportedLayer { level: 3 }));
        // Side out with centre already gone: single off-centre support, falls.
        let mut t = tower(6);
        let id = id_at(&t, 2, 1);
        t.blocks[id].status = BlockStatus::Extracted;
        assert_eq!(t.apply_extraction(id_at(&t, 2, 2)).unwrap(), Stability::Collapsed);
    }

    #[test]
    fn stability_of_partial_layers() {
        let mut t = tower(8);
        assert_eq!(t.stability_check(), Stability::Stable);
        for level in 1..8 {
            let id = id_at(&t, level, level % 2 * 2);
            t.blocks[id].status = BlockStatus::Extracted;
        }
        assert_eq!(t.stability_check(), Stability::Stable);
        let id = id_at(&t, 4, 1);
        t.blocks[id].status = BlockStatus::Extracted;
        assert_eq!(t.stability_check(), Stability::Collapsed);
    }

    #[test]
    fn collapse_is_absorbing() {
        let mut t = tower(6);
        let id = id_at(&t, 2, 0);
        assert_eq!(t.record_push(id, 0.5, 0.32, false).unwrap(), Stability::Collapsed);
        let snapshot = t.clone();
        assert_eq!(t.apply_extraction(id), Err(TowerError::CollapsedTower));
        assert_eq!(t.place_extracted_on_top(id), Err(TowerError::CollapsedTower));
        assert_eq!(t.load_distribution(1), Err(TowerError::CollapsedTower));
        assert_eq!(t.reaction_force_profile(id, 0.005, 1.0, 0), Err(TowerError::CollapsedTower));
        assert_eq!(t.mark_tested(id), Err(TowerError::CollapsedTower));
        assert_eq!(t, snapshot);
    }

    #[test]
    fn extraction_errors() {
        let mut t = tower(6);
        let id = id_at(&t, 2, 0);
        t.apply_extraction(id).unwrap();
        assert_eq!(t.extracted_count[1], 1);
        assert_eq!(t.apply_extraction(id), Err(TowerError::AlreadyExtracted(id)));
        assert_eq!(t.place_extracted_on_top(id_at(&t, 2, 1)), Err(TowerError::NotExtracted(id_at(&t, 2, 1))));
        t.place_extracted_on_top(id).unwrap();
        assert_eq!(t.place_extracted_on_top(id), Err(TowerError::AlreadyPlaced(id)));
    }

    #[test]
    fn restacking_builds_a_crossed_level() {
        let mut t = tower(8);
        t.capacity = f64::INFINITY;
        let top_orientation = t.orientation(8);
        let mut placed = Vec::new();
        for (level, slot) in [(3, 0), (4, 2), (5, 0)] {
            let id = id_at(&t, level, slot);
            assert_eq!(t.apply_extraction(id).unwrap(), Stability::Stable);
            placed.push(t.place_extracted_on_top(id).unwrap());
        }
        assert_eq!(t.level_count(), 9);
        assert!(t.level_complete(9));
        assert_eq!(t.present_in_level(9), placed);
        assert_ne!(t.orientation(9), top_orientation);
        // Above level 2: three levels with one block missing, three full, one new.
        let w = t.config.block_weight();
        let sum = t.load_distribution(2).unwrap().iter().sum::<f64>();
        assert_relative_eq!(sum, 18.0 * w, epsilon = 1e-12);
    }

    #[test]
    fn full_new_level_adds_three_block_weights() {
        let mut t = tower(8);
        t.capacity = f64::INFINITY;
        let w = t.config.block_weight();
        assert_eq!(t.load_distribution(8).unwrap().iter().sum::<f64>(), 0.0);
        let below = t.load_distribution(1).unwrap().iter().sum::<f64>();
        for level in [2, 3, 4] {
            let id = id_at(&t, level, 0);
            t.apply_extraction(id).unwrap();
            t.place_extracted_on_top(id).unwrap();
        }
        // The old top now carries a full level; mass moved within the stack
        // leaves the bottom layer's load unchanged.
        let old_top = t.load_distribution(8).unwrap().iter().sum::<f64>();
        assert_relative_eq!(old_top, 3.0 * w, epsilon = 1e-12);
        let after = t.load_distribution(1).unwrap().iter().sum::<f64>();
        assert_relative_eq!(after, below, epsilon = 1e-12);
        assert_relative_eq!(below, 21.0 * w, epsilon = 1e-12);
    }

    #[test]
    fn accumulated_disturbance_topples_the_tower() {
        let mut t = tower(18);
        t.capacity = 2.5;
        let mut outcome = Stability::Stable;
        for level in 2..=6 {
            outcome = t.apply_extraction(id_at(&t, level, 0)).unwrap();
            if outcome == Stability::Collapsed {
                break;
            }
        }
        assert_eq!(outcome, Stability::Collapsed);
        assert_eq!(t.collapse_cause, Some(CollapseCause::Instability));
    }
}
