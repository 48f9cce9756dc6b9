//! Hybrid 2½-D visual servoing of an eye-in-hand camera toward a block face.
//!
//! Features are `s = (x, y, ln(Z/Z*), θu)` where `(x, y)` is the normalized
//! image position of a target point, `Z` its depth and `θu` the rotation
//! from the desired to the current camera orientation. The desired features
//! are all zero. With `P = (X, Y, Z)` the target point in the camera frame
//! and a camera twist `v = (v, ω)` the interaction matrix is
//!
//! ```text
//!       | -1/Z   0    x/Z   xy     -(1+x²)   y |
//!   L = |  0   -1/Z   y/Z   1+y²   -xy      -x |
//!       |  0     0   -1/Z   -y      x        0 |
//!       |  0     0     0        L_ω            |
//!   L_ω = I + θ/2 [u]× + (1 - sinc θ / sinc²(θ/2)) [u]×²
//! ```
//!
//! and the control law is `v = -λ L⁺ e`.

use crate::geometry::{
    condition_number, forward_kinematics, geometric_jacobian, log_so3, rotate_twist, skew, twist_transform,
    AxisAngle, CameraIntrinsics, GeometryError, JointState, KinematicChain, Mat3, Mat6, RigidPose, Vec3, Vec6,
    SINGULARITY_CONDITION,
};
use crate::perception::{
    build_group_model, corrupt_masks, front_face_pose, render_masks, track_step, tracker_reinitialize,
    true_face_in_camera, MaskNoise, PerceptionError, TrackNoise, TrackStatus,
};
use crate::perception::TrackState;
use crate::tower::{BlockId, TowerState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotations closer than this to π make `θu` ill-defined.
const SINGULAR_ANGLE_MARGIN: f64 = 1e-6;
/// Damping of the Jacobian pseudo-inverse.
pub const JACOBIAN_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServoError {
    #[error("tracking lost")]
    TrackingLost,
    #[error("rotation error of {theta} rad is too close to pi")]
    SingularFeatures { theta: f64 },
    #[error("invalid servo config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub x: f64,
    pub y: f64,
    pub log_depth_ratio: f64,
    pub theta_u: AxisAngle,
}

impl FeatureVector {
    pub fn as_vector(&self) -> Vec6 {
        let w = self.theta_u.0;
        Vec6::new(self.x, self.y, self.log_depth_ratio, w.x, w.y, w.z)
    }
}

/// Features of the target frame `rel` (pose of the target in the camera
/// frame) for a desired depth `z_star`. The desired target pose is straight
/// ahead at `z_star` with identity rotation, so `s* = 0` and `e_s = s`.
pub fn features_from_pose(rel: &RigidPose, z_star: f64) -> Result<FeatureVector, GeometryError> {
    let p = rel.translation;
    if !(p.z > 0.0) || !(z_star > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z.min(z_star)));
    }
    Ok(FeatureVector {
        x: p.x / p.z,
        y: p.y / p.z,
        log_depth_ratio: (p.z / z_star).ln(),
        theta_u: AxisAngle(log_so3(&rel.rotation.transpose())),
    })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Rotational block: time derivative of `θu` per unit camera angular velocity.
/// `θu` is taken from the current-to-desired rotation, so camera rotation
/// acts on it from the right and the `[u]×` term enters with a plus sign.
pub fn rotation_interaction(theta_u: &Vec3) -> Result<Mat3, ServoError> {
    let theta = theta_u.norm();
    if theta > std::f64::consts::PI - SINGULAR_ANGLE_MARGIN {
        return Err(ServoError::SingularFeatures { theta });
    }
    if theta < 1e-12 {
        return Ok(Mat3::identity());
    }
    let ux = skew(&(theta_u / theta));
    let c = 1.0 - sinc(theta) / sinc(theta / 2.0).powi(2);
    Ok(Mat3::identity() + ux * (theta / 2.0) + ux * ux * c)
}

/// Interaction matrix at features `s` with target depth `z`.
pub fn interaction_matrix(s: &FeatureVector, z: f64) -> Result<Mat6, ServoError> {
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z).into());
    }
    let (x, y) = (s.x, s.y);
    let mut l = Mat6::zeros();
    let rows = [
        [-1.0 / z, 0.0, x / z, x * y, -(1.0 + x * x), y],
        [0.0, -1.0 / z, y / z, 1.0 + y * y, -x * y, -x],
        [0.0, 0.0, -1.0 / z, -y, x, 0.0],
    ];
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            l[(i, j)] = *v;
        }
    }
    l.fixed_view_mut::<3, 3>(3, 3).copy_from(&rotation_interaction(&s.theta_u.0)?);
    Ok(l)
}

/// `v = -λ L⁺ e`.
pub fn control_law(l: &Mat6, e: &Vec6, lambda: f64) -> Vec6 {
    -(pseudo_inverse(l) * e) * lambda
}

// nalgebra's SVD loses ~1e-3 on some interaction matrices with clustered
// singular values, so invert directly and only fall back to the normal
// equations when L is singular.
fn pseudo_inverse(l: &Mat6) -> Mat6 {
    if let Some(inv) = l.try_inverse().filter(|m| m.iter().all(|v| v.is_finite())) {
        return inv;
    }
    let eig = (l.transpose() * l).symmetric_eigen();
    let tol = 1e-24 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let inv_vals = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    eig.eigenvectors * Mat6::from_diagonal(&inv_vals) * eig.eigenvectors.transpose() * l.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    /// Control gain (1/s).
    pub lambda: f64,
    /// Convergence threshold on `|e_s|`.
    pub tolerance: f64,
    pub loop_rate_hz: f64,
    /// Joint velocity limits (rad/s).
    pub joint_velocity_limit: [f64; 6],
    pub max_duration_s: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig {
            lambda: 0.5,
            tolerance: 2e-5,
            loop_rate_hz: 9.0,
            joint_velocity_limit: [0.6; 6],
            max_duration_s: 90.0,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        let bad = |m: &str| Err(ServoError::InvalidConfig(m.into()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.loop_rate_hz > 0.0) {
            return bad("loop rate must be positive");
        }
        if self.joint_velocity_limit.iter().any(|v| !(*v > 0.0)) {
            return bad("joint velocity limits must be positive");
        }
        if !(self.max_duration_s > 0.0) {
            return bad("max duration must be positive");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.loop_rate_hz
    }
}

/// End-effector geometry that fixes where the camera must end up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoGoal {
    /// Camera pose in the end-effector frame.
    pub extrinsics: RigidPose,
    /// Finger length along the end-effector z axis (m).
    pub finger_length: f64,
    /// Gap left between fingertip and face at the goal (m).
    pub standoff: f64,
}

impl Default for ServoGoal {
    fn default() -> Self {
        ServoGoal {
            extrinsics: RigidPose::from_translation(Vec3::new(0.0, -0.035, 0.0)),
            finger_length: 0.1,
            standoff: 0.005,
        }
    }
}

impl ServoGoal {
    fn tip_in_camera(&self) -> Vec3 {
        self.extrinsics.inverse().transform_point(&Vec3::new(0.0, 0.0, self.finger_length))
    }

    /// Desired depth of the target point.
    pub fn z_star(&self) -> f64 {
        self.tip_in_camera().z + self.standoff
    }

    /// Target frame relative to the front-face frame: shifted in the face
    /// plane so that, once it sits at `(0, 0, Z*)` in the camera, the
    /// fingertip faces the face centre.
    pub fn target_in_face(&self) -> RigidPose {
        let tip = self.tip_in_camera();
        RigidPose::from_translation(Vec3::new(-tip.x, -tip.y, 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ServoEvent {
    Singularity { condition: f64 },
    VelocityClamped { joint: usize },
    JointLimit { joint: usize },
}

/// Damped least-squares inverse `Jᵀ(JJᵀ + μI)⁻¹`.
fn damped_pinv(j: &Mat6) -> Mat6 {
    let jjt = j * j.transpose() + Mat6::identity() * JACOBIAN_DAMPING;
    let inv = jjt.try_inverse().unwrap_or_else(Mat6::zeros);
    j.transpose() * inv
}

/// Base-frame end-effector twist (at the flange origin) produced by a
/// camera-frame twist.
pub fn camera_to_base_twist(chain: &KinematicChain, q: &JointState, extrinsics: &RigidPose, v_cam: &Vec6) -> Vec6 {
    let ee = chain.frames(q)[6];
    rotate_twist(&ee.rotation) * (twist_transform(extrinsics) * v_cam)
}

/// One control cycle: features from the tracked pose, camera twist, joint
/// velocities through the damped Jacobian inverse, velocity and position
/// clamping, and an Euler step of one loop period.
pub fn servo_step(
    q: &JointState,
    chain: &KinematicChain,
    goal: &ServoGoal,
    track: &TrackState,
    config: &ServoConfig,
) -> Result<(JointState, Vec6, Vec<ServoEvent>), ServoError> {
    if track.status == TrackStatus::Lost {
        return Err(ServoError::TrackingLost);
    }
    let rel = track.pose.compose(&goal.target_in_face());
    let s = features_from_pose(&rel, goal.z_star())?;
    let e = s.as_vector();
    let l = interaction_matrix(&s, rel.translation.z)?;
    let v = control_law(&l, &e, config.lambda);

    let mut events = Vec::new();
    let j = geometric_jacobian(chain, q);
    let cond = condition_number(&j);
    if cond > SINGULARITY_CONDITION {
        events.push(ServoEvent::Singularity { condition: cond });
    }
    let v_base = camera_to_base_twist(chain, q, &goal.extrinsics, &v);
    let mut qdot = damped_pinv(&j) * v_base;
    let dt = config.dt();
    let mut next = *q;
    for i in 0..6 {
        let limit = config.joint_velocity_limit[i].min(chain.velocity_max[i]);
        if qdot[i].abs() > limit {
            qdot[i] = limit.copysign(qdot[i]);
            events.push(ServoEvent::VelocityClamped { joint: i });
        }
        let moved = q.0[i] + qdot[i] * dt;
        next.0[i] = moved.clamp(chain.position_min[i], chain.position_max[i]);
        if next.0[i] != moved {
            events.push(ServoEvent::JointLimit { joint: i });
        }
    }
    // A sign change of det J means the step crossed a singular configuration
    // even if neither end point is close enough to trip the threshold.
    if cond <= SINGULARITY_CONDITION {
        let j_next = geometric_jacobian(chain, &next);
        if j.determinant() * j_next.determinant() <= 0.0 && next != *q {
            events.push(ServoEvent::Singularity {
                condition: condition_number(&j_next).max(cond),
            });
        }
    }
    Ok((next, e, events))
}

/// Robot placement and sensors for a servo run.
#[derive(Debug, Clone)]
pub struct ServoScene<'a> {
    pub tower: &'a TowerState,
    pub chain: &'a KinematicChain,
    /// Robot base pose in the tower frame.
    pub robot_base: RigidPose,
    pub intrinsics: CameraIntrinsics,
    pub goal: ServoGoal,
}

impl ServoScene<'_> {
    pub fn end_effector(&self, q: &JointState) -> Result<RigidPose, GeometryError> {
        Ok(self.robot_base.compose(&forward_kinematics(self.chain, q)?))
    }

    pub fn camera(&self, q: &JointState) -> Result<RigidPose, GeometryError> {
        Ok(self.end_effector(q)?.compose(&self.goal.extrinsics))
    }

    /// Where the finger axis meets the target's front-face plane, in face
    /// coordinates (x horizontal, y down), or `None` when parallel.
    pub fn contact_point(&self, q: &JointState, target: BlockId) -> Result<Option<(f64, f64)>, ServoError> {
        let ee = self.end_effector(q)?;
        let face = front_face_pose(self.tower, target).map_err(PerceptionError::from)?;
        let n = face.rotation.column(2).into_owned();
        let dir = ee.rotation.column(2).into_owned();
        let denom = dir.dot(&n);
        if denom.abs() < 1e-9 {
            return Ok(None);
        }
        let s = (face.translation - ee.translation).dot(&n) / denom;
        let hit = face.inverse().transform_point(&(ee.translation + dir * s));
        Ok(Some((hit.x, hit.y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServoStop {
    Converged,
    TrackingLost,
    Singularity,
    Timeout,
    /// The first pose estimate from the masks failed.
    InitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: [f64; 6],
    pub error_norm: f64,
    pub e_proj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoResult {
    pub converged: bool,
    pub reason: ServoStop,
    pub time_s: f64,
    /// Horizontal and vertical offset of the contact point from the face
    /// centre (m); NaN when the finger axis misses the face plane.
    pub err_x: f64,
    pub err_y: f64,
    pub final_joints: JointState,
    pub trajectory: Vec<TrajectorySample>,
    pub events: Vec<ServoEvent>,
}

impl ServoResult {
    pub fn contact_offset(&self) -> f64 {
        self.err_x.hypot(self.err_y)
    }
}

/// Closed loop of tracking and servo steps toward the front face of
/// `target`, starting from a pose estimate made on the first camera frame.
pub fn run_servo(
    start: &JointState,
    target: BlockId,
    scene: &ServoScene,
    config: &ServoConfig,
    noise: &TrackNoise,
    mask_noise: &MaskNoise,
    seed: u64,
) -> Result<ServoResult, ServoError> {
    config.validate()?;
    let k = &scene.intrinsics;
    let dt = config.dt();
    let mut q = *start;
    let mut trajectory = Vec::new();
    let mut events = Vec::new();

    let finish = |q: JointState, reason: ServoStop, t: f64, trajectory, events| -> Result<ServoResult, ServoError> {
        let (err_x, err_y) = scene.contact_point(&q, target)?.unwrap_or((f64::NAN, f64::NAN));
        Ok(ServoResult {
            converged: reason == ServoStop::Converged,
            reason,
            time_s: t,
            err_x,
            err_y,
            final_joints: q,
            trajectory,
            events,
        })
    };

    let group = build_group_model(scene.tower, target)?;
    let camera = scene.camera(&q)?;
    let masks = corrupt_masks(&render_masks(&camera, k, scene.tower), mask_noise, seed);
    let truth = true_face_in_camera(scene.tower, target, &camera).map_err(PerceptionError::from)?;
    let mut track = match tracker_reinitialize(&group, &masks, k, &truth, noise) {
        Ok(t) => t,
        Err(PerceptionError::TargetNotVisible(_) | PerceptionError::DegenerateMask(_) | PerceptionError::IllConditioned(_)) => {
            return finish(q, ServoStop::InitFailed, 0.0, trajectory, events);
        }
        Err(e) => return Err(e.into()),
    };
    if track.status == TrackStatus::Lost {
        return finish(q, ServoStop::TrackingLost, 0.0, trajectory, events);
    }

    let max_steps = (config.max_duration_s / dt).ceil() as usize;
    for step in 0..=max_steps {
        let t = step as f64 * dt;
        let camera = scene.camera(&q)?;
        track = track_step(&track, &group, &camera, scene.tower, k, noise, seed)?;
        if track.status == TrackStatus::Lost {
            return finish(q, ServoStop::TrackingLost, t, trajectory, events);
        }
        let (next, e, step_events) = match servo_step(&q, scene.chain, &scene.goal, &track, config) {
            Ok(r) => r,
            Err(ServoError::SingularFeatures { .. }) => {
                return finish(q, ServoStop::Singularity, t, trajectory, events);
            }
            // Target swung behind the camera: nothing left to track.
            Err(ServoError::Geometry(GeometryError::NonPositiveDepth(_))) => {
                return finish(q, ServoStop::TrackingLost, t, trajectory, events);
            }
            Err(err) => return Err(err),
        };
        trajectory.push(TrajectorySample {
            t,
            q: q.0,
            error_norm: e.norm(),
            e_proj: track.e_proj,
        });
        if e.norm() < config.tolerance {
            return finish(q, ServoStop::Converged, t, trajectory, events);
        }
        let singular = step_events.iter().any(|ev| matches!(ev, ServoEvent::Singularity { .. }));
        events.extend(step_events);
        if singular {
            return finish(q, ServoStop::Singularity, t, trajectory, events);
        }
        if step == max_steps {
            break;
        }
        q = next;
    }
    finish(q, ServoStop::Timeout, max_steps as f64 * dt, trajectory, events)
}

/// Free-flying camera under the exact control law: returns `|e_s|` at every
/// loop step, starting from target pose `rel` (target in camera frame),
/// until the tolerance is met or `max_steps` is reached.
pub fn simulate_free_camera(rel: &RigidPose, z_star: f64, config: &ServoConfig, max_steps: usize) -> Result<Vec<f64>, ServoError> {
    let dt = config.dt();
    let mut rel = *rel;
    let mut norms = Vec::new();
    for _ in 0..=max_steps {
        let s = features_from_pose(&rel, z_star)?;
        let e = s.as_vector();
        norms.push(e.norm());
        if e.norm() < config.tolerance {
            break;
        }
        let l = interaction_matrix(&s, rel.translation.z)?;
        let v = control_law(&l, &e, config.lambda);
        rel = RigidPose::exp(&(v * dt)).inverse().compose(&rel);
    }
    Ok(norms)
}

/// Damped least-squares inverse kinematics for the flange pose `target`
/// (robot base frame), starting from `guess`.
pub fn solve_ik(chain: &KinematicChain, target: &RigidPose, guess: &JointState) -> Result<JointState, GeometryError> {
    let mut q = *guess;
    for _ in 0..500 {
        let ee = chain.frames(&q)[6];
        let dp = target.translation - ee.translation;
        let dr = log_so3(&(target.rotation * ee.rotation.transpose()));
        let err = Vec6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z);
        if err.norm() < 1e-12 {
            break;
        }
        let j = geometric_jacobian(chain, &q);
        let jjt = j * j.transpose() + Mat6::identity() * 1e-8;
        let dq = j.transpose() * jjt.try_inverse().unwrap_or_else(Mat6::zeros) * err;
        q = JointState::from_vector(&(q.as_vector() + dq));
    }
    chain.check_limits(&q)?;
    Ok(q)
}

/// Flange pose from which the arm starts its approach: 0.25 m in front of
/// the base, 0.22 m up, finger pointing along base +x with the camera above it.
pub fn home_flange_pose() -> RigidPose {
    RigidPose {
        rotation: Mat3::from_columns(&[-Vec3::y(), -Vec3::z(), Vec3::x()]),
        translation: Vec3::new(0.25, 0.0, 0.22),
    }
}

/// Joint configuration reaching [`home_flange_pose`].
pub fn home_configuration(chain: &KinematicChain) -> Result<JointState, GeometryError> {
    let guess = JointState([0.0, -0.12, -2.63, 0.0, 1.18, std::f64::consts::FRAC_PI_2]);
    solve_ik(chain, &home_flange_pose(), &guess)
}

/// Robot base pose (tower frame) that puts the camera of the arm at `q`
/// squarely in front of the target's front face at `distance`, then moves
/// the robot by `offset` (metres, face frame: right, down, toward the face)
/// and turns it by `yaw` (rad) about the vertical through the face centre.
pub fn place_robot_facing(
    tower: &TowerState,
    target: BlockId,
    chain: &KinematicChain,
    q: &JointState,
    goal: &ServoGoal,
    distance: f64,
    offset: Vec3,
    yaw: f64,
) -> Result<RigidPose, ServoError> {
    let face = front_face_pose(tower, target).map_err(PerceptionError::from)?;
    let camera_in_base = forward_kinematics(chain, q)?.compose(&goal.extrinsics);
    let desired_camera = face.compose(&RigidPose::from_translation(Vec3::new(0.0, 0.0, -distance) + offset));
    let nominal_base = desired_camera.compose(&camera_in_base.inverse());
    let turn = RigidPose::from_translation(face.translation)
        .compose(&RigidPose::from_rotation(crate::geometry::rot_z(yaw)))
        .compose(&RigidPose::from_translation(-face.translation));
    Ok(turn.compose(&nominal_base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, rot_z};
    use crate::perception::TrackNoise;
    use crate::tower::{new_tower, TowerConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rel(rng: &mut ChaCha8Rng, max_angle: f64) -> RigidPose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize();
        RigidPose {
            rotation: exp_so3(&(axis * rng.random_range(0.0..max_angle))),
            translation: Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.1..0.4),
            ),
        }
    }

    #[test]
    fn features_at_goal_and_depth_ratio() {
        let rel = RigidPose::from_translation(Vec3::new(0.0, 0.0, 0.105));
        let s = features_from_pose(&rel, 0.105).unwrap();
        assert_eq!(s.as_vector(), Vec6::zeros());
        let far = RigidPose::from_translation(Vec3::new(0.0, 0.0, 0.105 * std::f64::consts::E));
        assert_relative_eq!(features_from_pose(&far, 0.105).unwrap().log_depth_ratio, 1.0, epsilon = 1e-12);
        let behind = RigidPose::from_translation(Vec3::new(0.0, 0.0, -0.1));
        assert!(matches!(features_from_pose(&behind, 0.105), Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn features_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rel = random_rel(&mut rng, 2.5);
            let s = features_from_pose(&rel, 0.1).unwrap();
            let p = rel.translation;
            assert_relative_eq!(s.x, p.x / p.z, epsilon = 1e-12);
            assert_relative_eq!(s.y, p.y / p.z, epsilon = 1e-12);
            // θu rotates the desired camera onto the current one.
            assert!((exp_so3(&s.theta_u.0) - rel.rotation.transpose()).amax() < 1e-9);
        }
    }

    #[test]
    fn rotation_block_fixes_rotation_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(rotation_interaction(&Vec3::zeros()).unwrap(), Mat3::identity());
        for _ in 0..100 {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let tu = axis * rng.random_range(0.0..std::f64::consts::PI - 0.1);
            let lw = rotation_interaction(&tu).unwrap();
            assert!((lw * tu - tu).amax() < 1e-9);
        }
        let near_pi = Vec3::new(0.0, 0.0, std::f64::consts::PI);
        assert!(matches!(rotation_interaction(&near_pi), Err(ServoError::SingularFeatures { .. })));
    }

    #[test]
    fn interaction_matrix_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..100 {
            let rel = random_rel(&mut rng, 2.0);
            let v = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = features_from_pose(&rel, 0.1).unwrap();
            let l = interaction_matrix(&s, rel.translation.z).unwrap();
            let moved = |k: f64| {
                let r = RigidPose::exp(&(v * k)).inverse().compose(&rel);
                features_from_pose(&r, 0.1).unwrap().as_vector()
            };
            let fd = (moved(h) - moved(-h)) / (2.0 * h);
            assert!((fd - l * v).amax() < 1e-4, "{}", (fd - l * v).amax());
        }
    }

    #[test]
    fn pseudo_inverse_of_rank_deficient_matrix() {
        let mut l = Mat6::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 3.0 } else { 0.0 });
        let row = l.row(0).into_owned();
        l.set_row(5, &(row * 2.0));
        let p = pseudo_inverse(&l);
        // Moore-Penrose conditions.
        assert!((l * p * l - l).amax() < 1e-9);
        assert!((p * l * p - p).amax() < 1e-9);
        assert!(((l * p).transpose() - l * p).amax() < 1e-9);
        assert!(((p * l).transpose() - p * l).amax() < 1e-9);
    }

    #[test]
    fn control_law_is_linear_and_zero_at_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rel = random_rel(&mut rng, 1.0);
        let s = features_from_pose(&rel, 0.1).unwrap();
        let l = interaction_matrix(&s, rel.translation.z).unwrap();
        let e = s.as_vector();
        assert_eq!(control_law(&l, &Vec6::zeros(), 0.5), Vec6::zeros());
        assert!((control_law(&l, &e, 1.0) - control_law(&l, &e, 0.5) * 2.0).amax() < 1e-12);
        // Ideal closed loop: first-order decay of the error over one step.
        let cfg = ServoConfig::default();
        let norms = simulate_free_camera(&rel, 0.1, &cfg, 1).unwrap();
        let expected = 1.0 - cfg.lambda * cfg.dt();
        assert!((norms[1] / norms[0] - expected).abs() < 0.02);
    }

    #[test]
    fn free_camera_decays_exponentially() {
        let cfg = ServoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let rel = random_rel(&mut rng, 1.0);
            let norms = simulate_free_camera(&rel, 0.1, &cfg, 2000).unwrap();
            assert!(*norms.last().unwrap() < cfg.tolerance);
            for (k, n) in norms.iter().enumerate() {
                let t = k as f64 * cfg.dt();
                assert!(*n <= norms[0] * (-0.9 * cfg.lambda * t).exp() + 1e-15);
            }
        }
    }

    #[test]
    fn goal_geometry() {
        let g = ServoGoal::default();
        assert_relative_eq!(g.z_star(), 0.105, epsilon = 1e-12);
        assert!((g.target_in_face().translation - Vec3::new(0.0, -0.035, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn home_configuration_reaches_home_pose() {
        let chain = KinematicChain::default();
        let q = home_configuration(&chain).unwrap();
        let ee = forward_kinematics(&chain, &q).unwrap();
        assert!((ee.translation - home_flange_pose().translation).norm() < 1e-9);
        assert!(crate::geometry::rotation_distance(&ee.rotation, &home_flange_pose().rotation) < 1e-9);
        assert!(condition_number(&geometric_jacobian(&chain, &q)) < 100.0);
    }

    fn scene_setup() -> (TowerState, KinematicChain, JointState) {
        let tower = new_tower(&TowerConfig::default(), 4).unwrap();
        let chain = KinematicChain::default();
        let home = home_configuration(&chain).unwrap();
        (tower, chain, home)
    }

    #[test]
    fn zero_error_keeps_joints_still() {
        let (_, chain, home) = scene_setup();
        let goal = ServoGoal::default();
        let at_goal = RigidPose::from_translation(Vec3::new(0.0, 0.0, goal.z_star()))
            .compose(&goal.target_in_face().inverse());
        let track = TrackState::from_truth(&at_goal);
        let (q, e, events) = servo_step(&home, &chain, &goal, &track, &ServoConfig::default()).unwrap();
        assert!(e.norm() < 1e-15);
        assert_eq!(q, home);
        assert!(events.is_empty());
    }

    #[test]
    fn step_matches_chained_oracle_and_clamps() {
        let (_, chain, home) = scene_setup();
        let goal = ServoGoal::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let face = RigidPose {
            rotation: exp_so3(&Vec3::new(0.02, -0.03, 0.01)),
            translation: Vec3::new(0.01, 0.03, 0.2),
        };
        let track = TrackState::from_truth(&face);
        let mut cfg = ServoConfig::default();
        cfg.joint_velocity_limit = [10.0; 6];
        let (q, e, _) = servo_step(&home, &chain, &goal, &track, &cfg).unwrap();

        // Independent chain: SVD-damped inverse of J applied to the mapped twist.
        let rel = face.compose(&goal.target_in_face());
        let s = features_from_pose(&rel, goal.z_star()).unwrap();
        assert!((s.as_vector() - e).amax() < 1e-15);
        let v = -interaction_matrix(&s, rel.translation.z).unwrap().try_inverse().unwrap() * e * cfg.lambda;
        let ee = forward_kinematics(&chain, &home).unwrap();
        let x = goal.extrinsics;
        let w_ee = x.rotation * v.fixed_rows::<3>(3);
        let v_ee = x.rotation * v.fixed_rows::<3>(0) + x.translation.cross(&w_ee);
        let mut v_base = Vec6::zeros();
        v_base.fixed_rows_mut::<3>(0).copy_from(&(ee.rotation * v_ee));
        v_base.fixed_rows_mut::<3>(3).copy_from(&(ee.rotation * w_ee));
        let svd = geometric_jacobian(&chain, &home).svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut qdot = Vec6::zeros();
        for i in 0..6 {
            let sv = svd.singular_values[i];
            qdot += vt.row(i).transpose() * (sv / (sv * sv + JACOBIAN_DAMPING) * u.column(i).dot(&v_base));
        }
        let oracle = home.as_vector() + qdot * cfg.dt();
        assert!((q.as_vector() - oracle).amax() < 1e-9);

        // Tight limits: every joint rate is clamped exactly.
        let mut tight = ServoConfig::default();
        tight.joint_velocity_limit = [1e-4; 6];
        let (q2, _, events) = servo_step(&home, &chain, &goal, &track, &tight).unwrap();
        for i in 0..6 {
            let rate = (q2.0[i] - home.0[i]) / tight.dt();
            assert!(rate.abs() <= 1e-4 + 1e-15);
            if qdot[i].abs() > 1e-4 {
                assert_relative_eq!(rate.abs(), 1e-4, epsilon = 1e-12);
            }
        }
        assert!(events.iter().any(|e| matches!(e, ServoEvent::VelocityClamped { .. })));
        let _ = rng.random::<u8>();
    }

    #[test]
    fn lost_track_is_an_error() {
        let (_, chain, home) = scene_setup();
        let mut track = TrackState::from_truth(&RigidPose::from_translation(Vec3::new(0.0, 0.0, 0.2)));
        track.status = TrackStatus::Lost;
        assert_eq!(
            servo_step(&home, &chain, &ServoGoal::default(), &track, &ServoConfig::default()),
            Err(ServoError::TrackingLost)
        );
    }

    #[test]
    fn noiseless_run_hits_face_centre() {
        let (tower, chain, home) = scene_setup();
        let goal = ServoGoal::default();
        let target = tower.layers[8][1].unwrap();
        let base = place_robot_facing(&tower, target, &chain, &home, &goal, 0.25, Vec3::zeros(), 0.0).unwrap();
        let scene = ServoScene {
            tower: &tower,
            chain: &chain,
            robot_base: base,
            intrinsics: CameraIntrinsics::default(),
            goal,
        };
        let r = run_servo(&home, target, &scene, &ServoConfig::default(), &TrackNoise::zero(), &MaskNoise::none(), 1)
            .unwrap();
        assert!(r.converged, "{:?}", r.reason);
        assert!(r.err_x.abs() < 1e-6 && r.err_y.abs() < 1e-6);
        let again = run_servo(&home, target, &scene, &ServoConfig::default(), &TrackNoise::zero(), &MaskNoise::none(), 1)
            .unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn unreachable_target_does_not_converge() {
        let (tower, chain, home) = scene_setup();
        let goal = ServoGoal::default();
        let target = tower.layers[8][1].unwrap();
        // Robot standing 0.6 m back cannot reach the face.
        let base = place_robot_facing(&tower, target, &chain, &home, &goal, 0.6, Vec3::zeros(), 0.0).unwrap();
        let scene = ServoScene {
            tower: &tower,
            chain: &chain,
            robot_base: base,
            intrinsics: CameraIntrinsics::default(),
            goal,
        };
        let mut cfg = ServoConfig::default();
        cfg.max_duration_s = 40.0;
        let r = run_servo(&home, target, &scene, &cfg, &TrackNoise::zero(), &MaskNoise::none(), 1).unwrap();
        assert!(!r.converged);
        assert!(matches!(r.reason, ServoStop::Singularity | ServoStop::Timeout), "{:?}", r.reason);
    }

    #[test]
    fn yawed_robot_still_converges() {
        let (tower, chain, home) = scene_setup();
        let goal = ServoGoal::default();
        let target = tower.layers[5][0].unwrap();
        let base = place_robot_facing(&tower, target, &chain, &home, &goal, 0.27, Vec3::new(0.01, 0.005, 0.0), 0.08)
            .unwrap();
        let base = RigidPose::from_rotation(rot_z(0.0)).compose(&base);
        let scene = ServoScene {
            tower: &tower,
            chain: &chain,
            robot_base: base,
            intrinsics: CameraIntrinsics::default(),
            goal,
        };
        let r = run_servo(&home, target, &scene, &ServoConfig::default(), &TrackNoise::zero(), &MaskNoise::none(), 3)
            .unwrap();
        assert!(r.converged);
        assert!(r.contact_offset() < 1e-6);
    }
}
