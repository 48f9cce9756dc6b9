//! Pose of a rectangle from its four image corners, using the closed-form
//! infinitesimal plane-based solution (IPPE): the homography's Jacobian at
//! the model origin yields two candidate rotations, each paired with its
//! least-squares translation; the one that reprojects better wins.

use super::PerceptionError;
use crate::geometry::{CameraIntrinsics, Mat3, RigidPose, Vec3};
use nalgebra::{DMatrix, Matrix2, Vector2};

type P2 = Vector2<f64>;

/// Model corners of a `w x h` face in its own frame (x right, y down), in
/// TL, TR, BR, BL order.
fn face_model(w: f64, h: f64) -> [Vec3; 4] {
    [
        Vec3::new(-w / 2.0, -h / 2.0, 0.0),
        Vec3::new(w / 2.0, -h / 2.0, 0.0),
        Vec3::new(w / 2.0, h / 2.0, 0.0),
        Vec3::new(-w / 2.0, h / 2.0, 0.0),
    ]
}

/// Similarity transform moving points to zero mean and mean distance sqrt(2).
fn normalizer(pts: &[P2]) -> Mat3 {
    let c = pts.iter().sum::<P2>() / pts.len() as f64;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Mat3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// DLT homography mapping `src` to `dst` (normalized so `H[(2,2)] = 1`).
fn homography(src: &[P2], dst: &[P2]) -> Result<Mat3, PerceptionError> {
    let (ns, nd) = (normalizer(src), normalizer(dst));
    let mut a = DMatrix::<f64>::zeros(2 * src.len().max(5), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ns * Vec3::new(s.x, s.y, 1.0);
        let d = nd * Vec3::new(d.x, d.y, 1.0);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| PerceptionError::IllConditioned("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let (mut imin, mut smin, mut ssecond) = (0, f64::INFINITY, f64::INFINITY);
    for i in 0..sv.len() {
        if sv[i] < smin {
            ssecond = smin;
            smin = sv[i];
            imin = i;
        } else if sv[i] < ssecond {
            ssecond = sv[i];
        }
    }
    if !(ssecond > 1e-9 * sv.max()) {
        return Err(PerceptionError::IllConditioned("homography is not unique (collinear corners)".into()));
    }
    let h = vt.row(imin);
    let hn = Mat3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let nd_inv = nd
        .try_inverse()
        .ok_or_else(|| PerceptionError::IllConditioned("degenerate image points".into()))?;
    let hm = nd_inv * hn * ns;
    if hm[(2, 2)].abs() < 1e-12 || !hm.iter().all(|v| v.is_finite()) {
        return Err(PerceptionError::IllConditioned("homography is singular".into()));
    }
    Ok(hm / hm[(2, 2)])
}

/// The two rotations compatible with the first-order behaviour of the
/// homography at the model origin: image of the origin `v` and Jacobian `j`.
fn ippe_rotations(v: &P2, j: &Matrix2<f64>) -> Result<(Mat3, Mat3), PerceptionError> {
    let t = v.norm();
    let rv = if t < f64::EPSILON {
        Mat3::identity()
    } else {
        let s = (t * t + 1.0).sqrt();
        let cos = 1.0 / s;
        let sin = (1.0 - 1.0 / (s * s)).sqrt();
        let k = Mat3::new(0.0, 0.0, v.x, 0.0, 0.0, v.y, -v.x, -v.y, 0.0) / t;
        Mat3::identity() + k * sin + k * k * (1.0 - cos)
    };
    let b = Matrix2::new(
        rv[(0, 0)] - v.x * rv[(2, 0)],
        rv[(0, 1)] - v.x * rv[(2, 1)],
        rv[(1, 0)] - v.y * rv[(2, 0)],
        rv[(1, 1)] - v.y * rv[(2, 1)],
    );
    let binv = b
        .try_inverse()
        .ok_or_else(|| PerceptionError::IllConditioned("singular rotation basis".into()))?;
    let a = binv * j;
    let (c0, c1) = (a.column(0), a.column(1));
    let (ata, atb, btb) = (c0.dot(&c0), c0.dot(&c1), c1.dot(&c1));
    let gamma = (0.5 * (ata + btb + ((ata - btb).powi(2) + 4.0 * atb * atb).sqrt())).sqrt();
    if !(gamma > 0.0) {
        return Err(PerceptionError::IllConditioned("zero homography Jacobian".into()));
    }
    let r22 = a / gamma;
    let h = Matrix2::identity() - r22.transpose() * r22;
    let b1 = h[(0, 0)].max(0.0).sqrt();
    let mut b2 = h[(1, 1)].max(0.0).sqrt();
    if h[(0, 1)] < 0.0 {
        b2 = -b2;
    }
    let d = Vec3::new(r22[(0, 0)], r22[(1, 0)], b1).cross(&Vec3::new(r22[(0, 1)], r22[(1, 1)], b2));
    let (c, a33) = (P2::new(d.x, d.y), d.z);
    let r1 = Mat3::new(
        r22[(0, 0)], r22[(0, 1)], c.x,
        r22[(1, 0)], r22[(1, 1)], c.y,
        b1, b2, a33,
    );
    let r2 = Mat3::new(
        r22[(0, 0)], r22[(0, 1)], -c.x,
        r22[(1, 0)], r22[(1, 1)], -c.y,
        -b1, -b2, a33,
    );
    Ok((rv * r1, rv * r2))
}

/// Least-squares translation for a known rotation, from normalized image points.
fn estimate_translation(r: &Mat3, model: &[Vec3], image: &[P2]) -> Option<Vec3> {
    let mut ata = Mat3::zeros();
    let mut atb = Vec3::zeros();
    for (p, q) in model.iter().zip(image) {
        let ps = r * p;
        let rows = [
            (Vec3::new(1.0, 0.0, -q.x), q.x * ps.z - ps.x),
            (Vec3::new(0.0, 1.0, -q.y), q.y * ps.z - ps.y),
        ];
        for (a, b) in rows {
            ata += a * a.transpose();
            atb += a * b;
        }
    }
    ata.try_inverse().map(|inv| inv * atb)
}

/// RMS reprojection error (px) of the face corners under `pose`.
pub fn reprojection_error(pose: &RigidPose, corners: &[P2; 4], face_dims: (f64, f64), k: &CameraIntrinsics) -> f64 {
    let model = face_model(face_dims.0, face_dims.1);
    let mut sq = 0.0;
    for (p, q) in model.iter().zip(corners) {
        let pc = pose.transform_point(p);
        if pc.z <= 0.0 {
            return f64::INFINITY;
        }
        let u = P2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
        sq += (u - q).norm_squared();
    }
    (sq / 4.0).sqrt()
}

/// Pose of a rectangular face (in camera coordinates) from its corners
/// ordered TL, TR, BR, BL. The face frame has x to the right, y down and z
/// into the face, with the origin at its centre.
pub fn planar_pnp(corners: &[P2; 4], face_dims: (f64, f64), k: &CameraIntrinsics) -> Result<RigidPose, PerceptionError> {
    let model = face_model(face_dims.0, face_dims.1);
    let model2: Vec<P2> = model.iter().map(|p| P2::new(p.x, p.y)).collect();
    let image: Vec<P2> = corners.iter().map(|c| k.normalize(c)).collect();
    let h = homography(&model2, &image)?;
    let j = Matrix2::new(
        h[(0, 0)] - h[(2, 0)] * h[(0, 2)],
        h[(0, 1)] - h[(2, 1)] * h[(0, 2)],
        h[(1, 0)] - h[(2, 0)] * h[(1, 2)],
        h[(1, 1)] - h[(2, 1)] * h[(1, 2)],
    );
    let v = P2::new(h[(0, 2)], h[(1, 2)]);
    let (r1, r2) = ippe_rotations(&v, &j)?;

    let mut best: Option<(f64, RigidPose)> = None;
    for r in [r1, r2] {
        let Some(t) = estimate_translation(&r, &model, &image) else { continue };
        if !(t.z > 0.0) || !t.iter().all(|x| x.is_finite()) {
            continue;
        }
        let pose = RigidPose {
            rotation: r,
            translation: t,
        };
        let err = reprojection_error(&pose, corners, face_dims, k);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| PerceptionError::IllConditioned("no solution in front of the camera".into()))
}
