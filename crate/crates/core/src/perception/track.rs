use super::{front_face_corners, front_face_dims, front_face_pose, planar_pnp, InstanceMask, PerceptionError};
use crate::geometry::{exp_so3, log_so3, rotation_distance, CameraIntrinsics, RigidPose, Vec3};
use crate::rng::{mix, stream, stream_rng};
use crate::tower::{BlockId, TowerError, TowerState};
use nalgebra::Vector2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// One block of a tracking model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub id: BlockId,
    /// A long face of this block looks the same way as the target's front face.
    pub side_facing: bool,
}

/// Target block plus the neighbours tracked with it as one rigid model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub target: BlockId,
    pub members: Vec<GroupMember>,
    /// Box corners of every member, in the target block frame (m).
    pub model_points: Vec<Vec3>,
    pub face_dims: (f64, f64),
}

impl GroupModel {
    pub fn contains(&self, id: BlockId) -> bool {
        self.members.iter().any(|m| m.id == id)
    }
}

fn box_corners(pose: &RigidPose, l: f64, w: f64, h: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(8);
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                out.push(pose.transform_point(&Vec3::new(sx * l, sy * w, sz * h)));
            }
        }
    }
    out
}

fn model_from_members(tower: &TowerState, target: BlockId, ids: &[BlockId]) -> Result<GroupModel, TowerError> {
    let target_pose = tower.block_pose(target)?;
    let to_target = target_pose.inverse();
    let d = tower.config.block;
    let mut members = Vec::with_capacity(ids.len());
    let mut model_points = Vec::with_capacity(8 * ids.len());
    for &id in ids {
        let rel = to_target.compose(&tower.block_pose(id)?);
        // A perpendicular block whose centre sits out at the front end shows
        // its long face next to the target's front face.
        let perpendicular = rel.rotation[(0, 0)].abs() < 0.5;
        let side_facing = perpendicular && rel.translation.x > 0.5 * d.width;
        members.push(GroupMember { id, side_facing });
        model_points.extend(box_corners(&rel, d.length, d.width, d.height));
    }
    Ok(GroupModel {
        target,
        members,
        model_points,
        face_dims: front_face_dims(tower),
    })
}

/// Target plus touching Present blocks: horizontal neighbours in its level and
/// every Present block in the levels directly above and below.
pub fn build_group_model(tower: &TowerState, target: BlockId) -> Result<GroupModel, PerceptionError> {
    let block = tower.block(target)?;
    if !block.status.in_tower() {
        return Err(TowerError::NotExtracted(target).into());
    }
    let (level, slot) = (block.level, block.slot);
    let mut ids = vec![target];
    for other in tower.present_in_level(level) {
        let s = tower.block(other)?.slot;
        if other != target && s.abs_diff(slot) == 1 {
            ids.push(other);
        }
    }
    for lv in [level - 1, level + 1] {
        ids.extend(tower.present_in_level(lv));
    }
    Ok(model_from_members(tower, target, &ids)?)
}

/// Model made of the target block alone.
pub fn single_block_model(tower: &TowerState, target: BlockId) -> Result<GroupModel, PerceptionError> {
    let block = tower.block(target)?;
    if !block.status.in_tower() {
        return Err(TowerError::NotExtracted(target).into());
    }
    Ok(model_from_members(tower, target, &[target])?)
}

fn shoelace(poly: &[Vector2<f64>]) -> f64 {
    let mut a = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        a += p.x * q.y - q.x * p.y;
    }
    0.5 * a.abs()
}

/// Sutherland-Hodgman clip of a polygon against the image rectangle.
fn clip_to_image(poly: Vec<Vector2<f64>>, width: f64, height: f64) -> Vec<Vector2<f64>> {
    // (axis, bound, keep_below)
    let edges = [(0, -0.5, false), (0, width - 0.5, true), (1, -0.5, false), (1, height - 0.5, true)];
    let mut out = poly;
    for (axis, bound, below) in edges {
        if out.is_empty() {
            break;
        }
        let inside = |p: &Vector2<f64>| if below { p[axis] <= bound } else { p[axis] >= bound };
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (cur, prev) = (input[i], input[(i + input.len() - 1) % input.len()]);
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                out.push(prev + (cur - prev) * t);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

/// Projected area (px) of a planar face given by its 4 corners in the
/// camera frame; zero when any corner is behind the camera.
fn face_area(corners: &[Vec3; 4], k: &CameraIntrinsics) -> f64 {
    if corners.iter().any(|c| c.z <= 1e-6) {
        return 0.0;
    }
    let poly: Vec<_> = corners
        .iter()
        .map(|c| Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
        .collect();
    let clipped = clip_to_image(poly, k.width as f64, k.height as f64);
    if clipped.len() < 3 {
        0.0
    } else {
        shoelace(&clipped)
    }
}

/// Number of trackable feature points the model offers from `camera`
/// (tower frame). Every exterior face turned toward the camera contributes
/// in proportion to its projected area; long faces count double since their
/// edges and texture make a steadier reference than the small end faces.
pub fn feature_points(
    group: &GroupModel,
    tower: &TowerState,
    camera: &RigidPose,
    k: &CameraIntrinsics,
    noise: &TrackNoise,
) -> f64 {
    let d = tower.config.block;
    let to_cam = camera.inverse();
    let (hl, hw, hh) = (d.length / 2.0, d.width / 2.0, d.height / 2.0);
    let mut total = 0.0;
    for m in &group.members {
        let Ok(block) = tower.block(m.id) else { continue };
        if !block.status.in_tower() {
            continue;
        }
        let Ok(pose) = tower.block_pose(m.id) else { continue };
        // (outward normal, in-plane axes and half extents, weight)
        let mut faces: Vec<(Vec3, Vec3, f64, f64, f64)> = vec![
            (Vec3::x(), Vec3::y(), hw, hh, 1.0),
            (-Vec3::x(), Vec3::y(), hw, hh, 1.0),
        ];
        match block.slot {
            0 => faces.push((-Vec3::y(), Vec3::x(), hl, hh, 2.0)),
            2 => faces.push((Vec3::y(), Vec3::x(), hl, hh, 2.0)),
            _ => {}
        }
        for (n, u, hu, hv, weight) in faces {
            let centre = pose.transform_point(&(n.component_mul(&Vec3::new(hl, hw, hh))));
            let normal = pose.transform_vector(&n);
            if normal.dot(&(camera.translation - centre)) <= 0.0 {
                continue;
            }
            let v = Vec3::z();
            let local_centre = n.component_mul(&Vec3::new(hl, hw, hh));
            let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(a, b)| {
                let p = local_centre + u * (a * hu) + v * (b * hv);
                to_cam.transform_point(&pose.transform_point(&p))
            });
            total += weight * face_area(&corners, k);
        }
    }
    total * noise.point_density
}

/// Tracker noise model. Per frame the estimate is the true pose perturbed by
/// zero-mean jitter whose size scales as `1/sqrt(n)` with the number of
/// visible feature points and grows with relative motion, a persistent
/// translation bias, and the residual of the initial PnP pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackNoise {
    /// Rotation jitter scale (deg); divided by sqrt of the feature count.
    pub rot_sigma0_deg: f64,
    /// Translation jitter scale (m); divided by sqrt of the feature count.
    pub trans_sigma0: f64,
    /// Translation bias scale (m); divided by sqrt of the feature count.
    pub bias0: f64,
    /// Motion level at which jitter reaches half its full size.
    pub motion_saturation: f64,
    /// Translational speed (m/s) counted as one motion unit.
    pub velocity_scale: f64,
    /// Feature points per projected pixel.
    pub point_density: f64,
    /// Per-frame decay of the initial pose error.
    pub init_decay: f64,
    /// Tracking is lost above this projection error (deg).
    pub err_thr_deg: f64,
    /// Frame period (s).
    pub dt: f64,
}

impl Default for TrackNoise {
    fn default() -> Self {
        TrackNoise {
            rot_sigma0_deg: 30.0,
            trans_sigma0: 0.02,
            bias0: 0.012,
            motion_saturation: 1.2,
            velocity_scale: 0.01,
            point_density: 0.01,
            init_decay: 0.5,
            err_thr_deg: 25.0,
            dt: 1.0 / 9.0,
        }
    }
}

impl TrackNoise {
    pub fn zero() -> Self {
        TrackNoise {
            rot_sigma0_deg: 0.0,
            trans_sigma0: 0.0,
            bias0: 0.0,
            init_decay: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Tracking,
    Lost,
}

/// Tracker output. `pose` is the target front-face frame in the camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub pose: RigidPose,
    /// Rotation error of `pose` against the truth (deg).
    pub e_proj: f64,
    pub status: TrackStatus,
    pub frame: u64,
    /// Initial pose error (rotation vector, translation), decaying per frame.
    init_rot: Vec3,
    init_trans: Vec3,
    bias_unit: Option<Vec3>,
    /// Persistent rotation offset from an injected disturbance.
    jump: Vec3,
    prev_true: Option<RigidPose>,
}

fn status_for(e_proj: f64, thr: f64) -> TrackStatus {
    if e_proj > thr {
        TrackStatus::Lost
    } else {
        TrackStatus::Tracking
    }
}

impl TrackState {
    /// Tracker locked on the exact pose.
    pub fn from_truth(truth: &RigidPose) -> Self {
        Self::from_estimate(*truth, truth, f64::INFINITY)
    }

    /// Tracker started from `estimate`; the difference to `truth` becomes
    /// the initial error that the tracker refines away.
    pub fn from_estimate(estimate: RigidPose, truth: &RigidPose, err_thr_deg: f64) -> Self {
        let e_proj = rotation_distance(&estimate.rotation, &truth.rotation).to_degrees();
        TrackState {
            pose: estimate,
            e_proj,
            status: status_for(e_proj, err_thr_deg),
            frame: 0,
            init_rot: log_so3(&(estimate.rotation * truth.rotation.transpose())),
            init_trans: estimate.translation - truth.translation,
            bias_unit: None,
            jump: Vec3::zeros(),
            prev_true: None,
        }
    }

    /// Adds a persistent rotation disturbance (rotation vector, rad) that the
    /// tracker cannot recover from by itself.
    pub fn inject_jump(&mut self, rotation: Vec3) {
        self.jump += rotation;
    }
}

/// True pose of the target front face in the camera frame.
pub fn true_face_in_camera(tower: &TowerState, target: BlockId, camera: &RigidPose) -> Result<RigidPose, TowerError> {
    Ok(camera.inverse().compose(&front_face_pose(tower, target)?))
}

/// Advances the tracker by one frame with the camera at `camera` (tower frame).
pub fn track_step(
    state: &TrackState,
    group: &GroupModel,
    camera: &RigidPose,
    tower: &TowerState,
    k: &CameraIntrinsics,
    noise: &TrackNoise,
    seed: u64,
) -> Result<TrackState, PerceptionError> {
    if state.status == TrackStatus::Lost {
        return Ok(state.clone());
    }
    let truth = true_face_in_camera(tower, group.target, camera)?;
    let n = feature_points(group, tower, camera, k, noise).max(1.0);
    let mut rng = stream_rng(mix(seed, state.frame), stream::TRACKING);
    let mut gauss = || Vec3::new(
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
    );
    let z_rot = gauss();
    let z_trans = gauss();
    let bias_unit = match state.bias_unit {
        Some(b) => b,
        None => gauss(),
    };

    let motion = match &state.prev_true {
        Some(prev) => {
            let ang = rotation_distance(&prev.rotation, &truth.rotation).to_degrees() / noise.dt;
            let lin = (truth.translation - prev.translation).norm() / noise.dt / noise.velocity_scale;
            ang + lin
        }
        None => 0.0,
    };
    let gain = motion * motion / (motion * motion + noise.motion_saturation * noise.motion_saturation);
    let scale = gain / n.sqrt();

    let decay = noise.init_decay.powi(state.frame as i32 + 1);
    let rot_err = z_rot * (noise.rot_sigma0_deg.to_radians() * scale) + state.init_rot * decay + state.jump;
    let trans_err =
        z_trans * (noise.trans_sigma0 * scale) + bias_unit * (noise.bias0 / n.sqrt()) + state.init_trans * decay;

    let pose = RigidPose {
        rotation: exp_so3(&rot_err) * truth.rotation,
        translation: truth.translation + trans_err,
    };
    let e_proj = rotation_distance(&pose.rotation, &truth.rotation).to_degrees();
    Ok(TrackState {
        pose,
        e_proj,
        status: status_for(e_proj, noise.err_thr_deg),
        frame: state.frame + 1,
        init_rot: state.init_rot,
        init_trans: state.init_trans,
        bias_unit: Some(bias_unit),
        jump: state.jump,
        prev_true: Some(truth),
    })
}

/// Acquires the target from segmentation masks: corners of its front-face
/// mask, then planar PnP. `truth` is the true face pose, used only to score
/// the estimate.
pub fn tracker_reinitialize(
    group: &GroupModel,
    masks: &[InstanceMask],
    k: &CameraIntrinsics,
    truth: &RigidPose,
    noise: &TrackNoise,
) -> Result<TrackState, PerceptionError> {
    let mask = masks
        .iter()
        .find(|m| m.block_id == group.target && !m.is_empty())
        .ok_or(PerceptionError::TargetNotVisible(group.target))?;
    let corners = front_face_corners(mask)?;
    let estimate = planar_pnp(&corners, group.face_dims, k)?;
    Ok(TrackState::from_estimate(estimate, truth, noise.err_thr_deg))
}
