//! Rigid transforms, axis-angle rotations, pinhole projection and the
//! differential kinematics of a 6R serial arm.
//!
//! Twists are stored as `[vx, vy, vz, wx, wy, wz]` (linear first). All
//! quantities are SI; pixels only appear at the camera boundary.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Jacobian condition number above which a configuration is reported as singular.
pub const SINGULARITY_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("joint {joint} at {value:.6} rad outside [{min:.6}, {max:.6}]")]
    JointLimit {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("rotation is not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic distance between two rotations, in radians.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    AxisAngle::from_rotation(&(a.transpose() * b)).angle()
}

/// Rotation vector `theta * u` with `theta` in `[0, pi]`.
///
/// At exactly `theta = pi` the axis sign is ambiguous; the first non-zero
/// component of `u` is made positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub fn zero() -> Self {
        AxisAngle(Vec3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Unit axis, or `None` for the zero rotation.
    pub fn axis(&self) -> Option<Vec3> {
        let n = self.0.norm();
        (n > 0.0).then(|| self.0 / n)
    }

    pub fn to_rotation(&self) -> Mat3 {
        exp_so3(&self.0)
    }

    pub fn from_rotation(r: &Mat3) -> Self {
        AxisAngle(log_so3(r))
    }
}

/// Rodrigues' formula.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn log_so3(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let v = vee(r); // sin(theta) * u
    let sin = v.norm();
    let theta = sin.atan2(cos);
    if theta < 1e-9 {
        // theta / sin(theta) -> 1
        return v * (1.0 + theta * theta / 6.0);
    }
    if cos > 0.0 {
        return v * (theta / sin);
    }
    // Near pi: read the axis from the symmetric part, sign from the skew part.
    let sym = (r + r.transpose()) * 0.5;
    let uu = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let mut best = 0;
    for i in 1..3 {
        if uu[(i, i)] > uu[(best, best)] {
            best = i;
        }
    }
    let mut u: Vec3 = uu.column(best).into_owned() / uu[(best, best)].max(0.0).sqrt();
    u.normalize_mut();
    if sin > 1e-12 {
        if u.dot(&v) < 0.0 {
            u = -u;
        }
    } else if let Some(first) = u.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            u = -u;
        }
    }
    u * theta.min(PI)
}

/// Left Jacobian of SO(3); maps a rotation vector rate to the translation
/// part of an SE(3) exponential.
fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (b, c) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * b + k * k * c
}

/// An element of SE(3): `p_parent = rotation * p_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Checked constructor: `R^T R = I` and `det R = +1` within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let dev = (rotation.transpose() * rotation - Mat3::identity()).amax();
        let det_dev = (rotation.determinant() - 1.0).abs();
        if dev > 1e-9 || det_dev > 1e-9 {
            return Err(GeometryError::NotOrthonormal(dev.max(det_dev)));
        }
        Ok(RigidPose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidPose {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Mat3) -> Self {
        RigidPose {
            rotation: r,
            translation: Vec3::zeros(),
        }
    }

    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Exponential of a body twist `[v, w]` (unit time).
    pub fn exp(twist: &Vec6) -> RigidPose {
        let v = twist.fixed_rows::<3>(0).into_owned();
        let w = twist.fixed_rows::<3>(3).into_owned();
        RigidPose {
            rotation: exp_so3(&w),
            translation: so3_left_jacobian(&w) * v,
        }
    }

    /// Re-projects the rotation onto SO(3); used after long chains of products.
    pub fn orthonormalized(&self) -> RigidPose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        RigidPose {
            rotation: r,
            translation: self.translation,
        }
    }
}

impl Mul for RigidPose {
    type Output = RigidPose;
    fn mul(self, rhs: RigidPose) -> RigidPose {
        self.compose(&rhs)
    }
}

impl Mul<&RigidPose> for &RigidPose {
    type Output = RigidPose;
    fn mul(self, rhs: &RigidPose) -> RigidPose {
        self.compose(rhs)
    }
}

/// 6x6 adjoint of a pose: maps a twist expressed in the child frame (at the
/// child origin) to the same motion expressed in the parent frame.
///
/// For the camera-in-end-effector extrinsics this turns a camera-frame
/// velocity into an end-effector-frame velocity.
pub fn twist_transform(x: &RigidPose) -> Mat6 {
    let r = x.rotation;
    let mut ad = Mat6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&x.translation) * r));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad
}

/// Block-diagonal `(R, R)`: re-expresses a twist in a rotated frame without
/// moving its reference point.
pub fn rotate_twist(r: &Mat3) -> Mat6 {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// 640x480 colour stream of a consumer depth camera.
    fn default() -> Self {
        CameraIntrinsics {
            fx: 615.0,
            fy: 615.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, xy: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * xy.x + self.cx, self.fy * xy.y + self.cy)
    }
}

/// Pinhole projection of a camera-frame point (pixel centres at integer coordinates).
pub fn project(k: &CameraIntrinsics, p_cam: &Vec3) -> Result<Vector2<f64>, GeometryError> {
    if p_cam.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    Ok(Vector2::new(
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

/// One standard Denavit-Hartenberg row: `Rz(q + theta_offset) Tz(d) Tx(a) Rx(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub fn transform(&self, q: f64) -> RigidPose {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        RigidPose {
            rotation: Mat3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca),
            translation: Vec3::new(self.a * ct, self.a * st, self.d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState(pub [f64; 6]);

impl JointState {
    pub fn zeros() -> Self {
        JointState([0.0; 6])
    }

    pub fn as_vector(&self) -> Vec6 {
        Vec6::from_column_slice(&self.0)
    }

    pub fn from_vector(v: &Vec6) -> Self {
        let mut q = [0.0; 6];
        q.copy_from_slice(v.as_slice());
        JointState(q)
    }
}

/// A 6R serial arm: DH rows, joint position limits and velocity limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub dh: [DhRow; 6],
    pub position_min: [f64; 6],
    pub position_max: [f64; 6],
    pub velocity_max: [f64; 6],
}

impl Default for KinematicChain {
    /// Anthropomorphic arm with a spherical wrist and 0.9 m of stacked link
    /// length (0.2 shoulder + 0.3 upper arm + 0.3 forearm + 0.1 flange).
    /// At `q = 0` the arm stands fully stretched along the base z axis.
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let row = |a, alpha, d, theta_offset| DhRow {
            a,
            alpha,
            d,
            theta_offset,
        };
        let deg = |d: f64| d.to_radians();
        KinematicChain {
            dh: [
                row(0.0, FRAC_PI_2, 0.2, 0.0),
                row(0.3, 0.0, 0.0, FRAC_PI_2),
                row(0.0, FRAC_PI_2, 0.0, FRAC_PI_2),
                row(0.0, -FRAC_PI_2, 0.3, 0.0),
                row(0.0, FRAC_PI_2, 0.0, 0.0),
                row(0.0, 0.0, 0.1, 0.0),
            ],
            position_min: [deg(-170.0), deg(-120.0), deg(-170.0), deg(-170.0), deg(-125.0), deg(-350.0)],
            position_max: [deg(170.0), deg(120.0), deg(170.0), deg(170.0), deg(125.0), deg(350.0)],
            velocity_max: [0.6; 6],
        }
    }
}

impl KinematicChain {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for i in 0..6 {
            if !(self.velocity_max[i] > 0.0) {
                return Err(GeometryError::InvalidChain(format!(
                    "joint {i} velocity limit must be positive"
                )));
            }
            if !(self.position_min[i] < self.position_max[i]) {
                return Err(GeometryError::InvalidChain(format!(
                    "joint {i} position range is empty"
                )));
            }
        }
        Ok(())
    }

    pub fn check_limits(&self, q: &JointState) -> Result<(), GeometryError> {
        for (i, &v) in q.0.iter().enumerate() {
            if v < self.position_min[i] || v > self.position_max[i] || !v.is_finite() {
                return Err(GeometryError::JointLimit {
                    joint: i,
                    value: v,
                    min: self.position_min[i],
                    max: self.position_max[i],
                });
            }
        }
        Ok(())
    }

    /// Frames `0..=6` (base to flange), without limit checking.
    pub fn frames(&self, q: &JointState) -> [RigidPose; 7] {
        let mut out = [RigidPose::identity(); 7];
        for i in 0..6 {
            out[i + 1] = out[i].compose(&self.dh[i].transform(q.0[i]));
        }
        out
    }
}

pub fn forward_kinematics(chain: &KinematicChain, q: &JointState) -> Result<RigidPose, GeometryError> {
    chain.check_limits(q)?;
    Ok(chain.frames(q)[6])
}

/// Base-frame geometric Jacobian of the flange origin: rows are
/// `[linear velocity; angular velocity]`.
pub fn geometric_jacobian(chain: &KinematicChain, q: &JointState) -> Mat6 {
    let frames = chain.frames(q);
    let p_end = frames[6].translation;
    let mut j = Mat6::zeros();
    for i in 0..6 {
        let z = frames[i].rotation.column(2).into_owned();
        let o = frames[i].translation;
        let lin = z.cross(&(p_end - o));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// Ratio of extreme singular values; `f64::INFINITY` for a rank-deficient matrix.
pub fn condition_number(m: &Mat6) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= max * f64::EPSILON {
        f64::INFINITY
    } else {
        max / min
    }
}
