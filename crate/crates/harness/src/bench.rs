//! Desk-scale re-runs of the hardware experiments: force profiles, tracking
//! robustness while the tower turns, servo convergence per level, and mask
//! AP evaluation.

use crate::config::RunConfig;
use crate::game::servo_trial;
use crate::montecarlo::Stat;
use crate::{sim_err, HarnessError};
use jenga_core::geometry::{rot_z, RigidPose};
use jenga_core::perception::{
    ap_at_iou_images, build_group_model, corrupt_masks, facing_camera_pose, render_masks, single_block_model, track_step,
    true_face_in_camera, GroupModel, MaskImage, TrackNoise, TrackState, TrackStatus,
};
use jenga_core::rng::{mix, stream, stream_rng};
use jenga_core::servo::{home_configuration, ServoStop};
use jenga_core::tower::{new_tower, BlockId, TowerState};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Levels the policy may test with this configuration.
pub fn testable_levels(cfg: &RunConfig, tower: &TowerState) -> Vec<usize> {
    let lo = cfg.policy.workspace_min_level.max(1);
    let hi = cfg
        .policy
        .workspace_max_level
        .min(tower.level_count().saturating_sub(cfg.policy.excluded_top_levels));
    (lo..=hi).collect()
}

fn block_at(tower: &TowerState, level: usize, slot: usize) -> Result<BlockId, HarnessError> {
    tower
        .layers
        .get(level.wrapping_sub(1))
        .and_then(|l| l[slot])
        .ok_or_else(|| HarnessError::Config(format!("no block at level {level} slot {slot}")))
}

// ---------------------------------------------------------------- force

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceProfile {
    pub block: BlockId,
    pub level: usize,
    pub slot: usize,
    pub load_bearing: bool,
    pub plateau: f64,
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceSampleRow {
    pub trace: usize,
    pub block: BlockId,
    pub level: usize,
    pub slot: usize,
    pub load_bearing: bool,
    pub t: f64,
    pub force: f64,
    pub thr_aggressive: f64,
    pub thr_conservative: f64,
}

/// Full-travel force traces of `n_blocks` blocks spread over the testable
/// levels of one tower, without the abort.
pub fn bench_force_profiles(cfg: &RunConfig, n_blocks: usize, seed: u64) -> Result<Vec<ForceProfile>, HarnessError> {
    let tower = new_tower(&cfg.tower, seed).map_err(sim_err)?;
    let levels = testable_levels(cfg, &tower);
    if levels.is_empty() {
        return Err(HarnessError::Config("no testable levels".into()));
    }
    let travel = cfg.tower.block.length + cfg.force.clearance;
    let duration = travel / cfg.force.push_speed;
    let mut rng = stream_rng(seed, stream::SCENE);
    (0..n_blocks)
        .map(|i| {
            let level = levels[i * levels.len() / n_blocks.max(1) % levels.len()];
            let slot = rng.random_range(0..3);
            let id = block_at(&tower, level, slot)?;
            let trace = tower
                .reaction_force_profile(id, cfg.force.push_speed, duration, mix(seed, i as u64))
                .map_err(sim_err)?;
            Ok(ForceProfile {
                block: id,
                level,
                slot,
                load_bearing: tower.is_load_bearing(id).map_err(sim_err)?,
                plateau: tower.plateau_force(id).map_err(sim_err)?,
                samples: trace.samples,
            })
        })
        .collect()
}

pub fn force_rows(cfg: &RunConfig, profiles: &[ForceProfile]) -> Vec<ForceSampleRow> {
    let mut rows = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        for &(t, force) in &p.samples {
            rows.push(ForceSampleRow {
                trace: i,
                block: p.block,
                level: p.level,
                slot: p.slot,
                load_bearing: p.load_bearing,
                t,
                force,
                thr_aggressive: cfg.policy.thr_aggressive,
                thr_conservative: cfg.policy.thr_conservative,
            });
        }
    }
    rows
}

// ------------------------------------------------------------- tracking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub level: usize,
    /// deg/s
    pub omega: f64,
    /// Mean percentage of the run tracked before the first failure.
    pub single_pct: f64,
    pub group_pct: f64,
    pub group_min_pct: f64,
}

/// Camera pose at time `t` while the tower turns back and forth through
/// `arc_deg` at `omega` deg/s; equivalently the camera orbits the tower axis.
fn orbit_camera(start: &RigidPose, omega: f64, arc_deg: f64, t: f64) -> RigidPose {
    let period = 2.0 * arc_deg;
    let a = (omega * t) % period;
    let angle = if a <= arc_deg { a } else { period - a };
    RigidPose::from_rotation(rot_z(angle.to_radians())).compose(start)
}

/// Percentage of `duration` tracked before `e_proj` first exceeds the threshold.
pub fn tracked_percentage(
    tower: &TowerState,
    model: &GroupModel,
    omega: f64,
    cfg: &RunConfig,
    noise: &TrackNoise,
    seed: u64,
) -> Result<f64, HarnessError> {
    let b = &cfg.bench;
    let k = &cfg.perception.intrinsics;
    let start = facing_camera_pose(tower, model.target, b.tracking_distance).map_err(sim_err)?;
    let steps = (b.tracking_duration_s / noise.dt).round() as usize;
    let truth = true_face_in_camera(tower, model.target, &start).map_err(sim_err)?;
    let mut state = TrackState::from_estimate(truth, &truth, noise.err_thr_deg);
    for i in 0..steps {
        let camera = orbit_camera(&start, omega, b.tracking_arc_deg, i as f64 * noise.dt);
        state = track_step(&state, model, &camera, tower, k, noise, seed).map_err(sim_err)?;
        if state.status == TrackStatus::Lost {
            return Ok(100.0 * i as f64 / steps as f64);
        }
    }
    Ok(100.0)
}

/// Single-block versus group model on the centre block of each bench level,
/// at each rotation rate.
pub fn bench_tracking(cfg: &RunConfig, seed: u64) -> Result<Vec<TrackingRow>, HarnessError> {
    let tower = new_tower(&cfg.tower, seed).map_err(sim_err)?;
    let noise = &cfg.perception.tracking;
    let b = &cfg.bench;
    let trials = b.tracking_trials.max(1);
    let cases: Vec<(usize, f64)> = b
        .tracking_levels
        .iter()
        .flat_map(|&l| b.tracking_rates.iter().map(move |&w| (l, w)))
        .collect();
    cases
        .par_iter()
        .enumerate()
        .map(|(row, &(level, omega))| {
            let target = block_at(&tower, level, 1)?;
            let single = single_block_model(&tower, target).map_err(sim_err)?;
            let group = build_group_model(&tower, target).map_err(sim_err)?;
            let (mut s, mut g, mut gmin) = (0.0, 0.0, 100.0f64);
            for trial in 0..trials {
                let ts = mix(mix(seed, row as u64), trial as u64);
                s += tracked_percentage(&tower, &single, omega, cfg, noise, ts)?;
                let gp = tracked_percentage(&tower, &group, omega, cfg, noise, ts)?;
                g += gp;
                gmin = gmin.min(gp);
            }
            Ok(TrackingRow {
                level,
                omega,
                single_pct: s / trials as f64,
                group_pct: g / trials as f64,
                group_min_pct: gmin,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- servo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoTrialRow {
    pub level: usize,
    pub trial: usize,
    pub block: BlockId,
    pub seed: u64,
    pub reason: ServoStop,
    pub time_s: f64,
    /// Contact offset from the face centre (mm); NaN when the axis misses.
    pub err_x_mm: f64,
    pub err_y_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoLevelRow {
    pub level: usize,
    pub trials: usize,
    pub converged: usize,
    pub time_mean_s: f64,
    pub time_std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoAccuracy {
    pub converged: usize,
    pub err_x_mean_mm: f64,
    pub err_x_std_mm: f64,
    pub err_y_mean_mm: f64,
    pub err_y_std_mm: f64,
    pub max_offset_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoBench {
    pub trials: Vec<ServoTrialRow>,
    pub levels: Vec<ServoLevelRow>,
    pub accuracy: ServoAccuracy,
}

pub fn servo_accuracy(trials: &[ServoTrialRow]) -> ServoAccuracy {
    let ok: Vec<&ServoTrialRow> = trials.iter().filter(|t| t.reason == ServoStop::Converged).collect();
    let xs: Vec<f64> = ok.iter().map(|t| t.err_x_mm).collect();
    let ys: Vec<f64> = ok.iter().map(|t| t.err_y_mm).collect();
    let (sx, sy) = (Stat::of(&xs), Stat::of(&ys));
    ServoAccuracy {
        converged: ok.len(),
        err_x_mean_mm: sx.mean,
        err_x_std_mm: sx.std,
        err_y_mean_mm: sy.mean,
        err_y_std_mm: sy.std,
        max_offset_mm: ok.iter().map(|t| t.err_x_mm.hypot(t.err_y_mm)).fold(0.0, f64::max),
    }
}

/// `trials_per_level` approaches to random blocks of each listed level.
pub fn bench_servo_levels(
    cfg: &RunConfig,
    levels: &[usize],
    trials_per_level: usize,
    seed: u64,
) -> Result<ServoBench, HarnessError> {
    let tower = new_tower(&cfg.tower, seed).map_err(sim_err)?;
    let home = home_configuration(&cfg.robot.chain).map_err(sim_err)?;
    let jobs: Vec<(usize, usize)> = levels
        .iter()
        .flat_map(|&l| (0..trials_per_level).map(move |t| (l, t)))
        .collect();
    let trials: Vec<ServoTrialRow> = jobs
        .par_iter()
        .map(|&(level, trial)| {
            let ts = mix(mix(seed, level as u64), trial as u64);
            let slot = stream_rng(ts, stream::SCENE).random_range(0..3);
            let block = block_at(&tower, level, slot)?;
            let r = servo_trial(cfg, &tower, block, &home, ts)?;
            Ok(ServoTrialRow {
                level,
                trial,
                block,
                seed: ts,
                reason: r.reason,
                time_s: r.time_s,
                err_x_mm: r.err_x * 1e3,
                err_y_mm: r.err_y * 1e3,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let level_rows = levels
        .iter()
        .map(|&level| {
            let ok: Vec<f64> = trials
                .iter()
                .filter(|t| t.level == level && t.reason == ServoStop::Converged)
                .map(|t| t.time_s)
                .collect();
            let s = Stat::of(&ok);
            ServoLevelRow {
                level,
                trials: trials_per_level,
                converged: ok.len(),
                time_mean_s: s.mean,
                time_std_s: s.std,
            }
        })
        .collect();
    let accuracy = servo_accuracy(&trials);
    Ok(ServoBench {
        trials,
        levels: level_rows,
        accuracy,
    })
}

/// Servo bench over every testable level.
pub fn bench_servo(cfg: &RunConfig, trials_per_level: usize, seed: u64) -> Result<ServoBench, HarnessError> {
    let tower = new_tower(&cfg.tower, seed).map_err(sim_err)?;
    bench_servo_levels(cfg, &testable_levels(cfg, &tower), trials_per_level, seed)
}

// --------------------------------------------------------- segmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub iou: f64,
    /// Percent.
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub rows: Vec<ApRow>,
    pub mean: f64,
}

/// AP of `predictions` against `ground_truth`, matching images by id.
/// Ground-truth images without predictions count as missed; predictions for
/// unknown images are false positives.
pub fn bench_segmentation_eval(predictions: &[MaskImage], ground_truth: &[MaskImage], thresholds: &[f64]) -> ApTable {
    let mut ids: Vec<u64> = ground_truth.iter().chain(predictions).map(|i| i.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let gather = |set: &[MaskImage], id: u64| -> Vec<_> {
        set.iter().filter(|i| i.id == id).flat_map(|i| i.masks.iter().cloned()).collect()
    };
    let pairs: Vec<(Vec<_>, Vec<_>)> = ids.iter().map(|&id| (gather(predictions, id), gather(ground_truth, id))).collect();
    let refs: Vec<(&[_], &[_])> = pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    let rows: Vec<ApRow> = thresholds
        .iter()
        .map(|&iou| ApRow {
            iou,
            ap: 100.0 * ap_at_iou_images(&refs, iou),
        })
        .collect();
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.ap).sum::<f64>() / rows.len() as f64
    };
    ApTable { rows, mean }
}

/// Oracle masks of the tower seen from random viewpoints, and their
/// corrupted copies standing in for a segmenter's output.
pub fn synthetic_segmentation_set(cfg: &RunConfig, n_images: usize, seed: u64) -> Result<(Vec<MaskImage>, Vec<MaskImage>), HarnessError> {
    let tower = new_tower(&cfg.tower, seed).map_err(sim_err)?;
    let levels = testable_levels(cfg, &tower);
    let k = &cfg.perception.intrinsics;
    let mut gt = Vec::with_capacity(n_images);
    let mut pred = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = stream_rng(mix(seed, i as u64), stream::SCENE);
        let level = levels[rng.random_range(0..levels.len())];
        let target = block_at(&tower, level, 1)?;
        let start = facing_camera_pose(&tower, target, rng.random_range(0.25..0.45)).map_err(sim_err)?;
        let camera = RigidPose::from_rotation(rot_z(rng.random_range(-0.6..0.6))).compose(&start);
        let masks = render_masks(&camera, k, &tower);
        let noisy = corrupt_masks(&masks, &cfg.perception.masks, mix(seed, i as u64));
        gt.push(MaskImage { id: i as u64, masks });
        pred.push(MaskImage {
            id: i as u64,
            masks: noisy,
        });
    }
    Ok((gt, pred))
}
