use super::{InstanceMask, PerceptionError};
use nalgebra::{Matrix2, Vector2};

/// Masks smaller than this many pixels are rejected.
pub const MIN_MASK_AREA: usize = 50;
/// RMS distance (px) of boundary points to their fitted sides above which the
/// mask is not a quadrilateral.
const MAX_FIT_RESIDUAL: f64 = 1.5;
const MIN_SIDE_POINTS: usize = 3;

type P2 = Vector2<f64>;

/// Mid-points between each mask pixel centre and its 4-neighbours outside
/// the mask; they trace the mask outline at sub-pixel level.
fn boundary_points(mask: &InstanceMask) -> Vec<P2> {
    let mut pts = Vec::new();
    for (x, y) in mask.pixels() {
        let (xi, yi) = (x as i64, y as i64);
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            if !mask.get(xi + dx, yi + dy) {
                pts.push(P2::new(x as f64 + 0.5 * dx as f64, y as f64 + 0.5 * dy as f64));
            }
        }
    }
    pts
}

fn cross(o: &P2, a: &P2, b: &P2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Andrew's monotone chain; counter-clockwise in a y-up sense.
fn convex_hull(points: &[P2]) -> Vec<P2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<P2> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<P2> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area enclosing rectangle: its four corners, in order around it.
fn min_area_rect(hull: &[P2]) -> [P2; 4] {
    let mut best = (f64::INFINITY, [P2::zeros(); 4]);
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()] - hull[i];
        if e.norm() < 1e-12 {
            continue;
        }
        let u = e.normalize();
        let n = P2::new(-u.y, u.x);
        let (mut a0, mut a1, mut b0, mut b1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in hull {
            let (a, b) = (p.dot(&u), p.dot(&n));
            a0 = a0.min(a);
            a1 = a1.max(a);
            b0 = b0.min(b);
            b1 = b1.max(b);
        }
        let area = (a1 - a0) * (b1 - b0);
        if area < best.0 {
            best = (area, [u * a0 + n * b0, u * a1 + n * b0, u * a1 + n * b1, u * a0 + n * b1]);
        }
    }
    best.1
}

fn point_segment_distance(p: &P2, a: &P2, b: &P2) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Total-least-squares line through `pts`: (point on line, unit normal).
fn fit_line(pts: &[P2]) -> (P2, P2) {
    let c = pts.iter().sum::<P2>() / pts.len() as f64;
    let mut cov = Matrix2::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let i = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
    (c, eig.eigenvectors.column(i).into_owned())
}

fn intersect(l1: &(P2, P2), l2: &(P2, P2)) -> Option<P2> {
    // n . x = n . c for both lines
    let m = Matrix2::new(l1.1.x, l1.1.y, l2.1.x, l2.1.y);
    let rhs = P2::new(l1.1.dot(&l1.0), l2.1.dot(&l2.0));
    let inv = m.try_inverse()?;
    Some(inv * rhs)
}

/// Orders four points TL, TR, BR, BL in image coordinates (y down).
pub(crate) fn order_corners(pts: [P2; 4]) -> [P2; 4] {
    let c = pts.iter().sum::<P2>() / 4.0;
    let mut sorted = pts;
    sorted.sort_by(|a, b| (a.y - c.y).atan2(a.x - c.x).total_cmp(&(b.y - c.y).atan2(b.x - c.x)));
    let tl = (0..4)
        .min_by(|&i, &j| (sorted[i].x + sorted[i].y).total_cmp(&(sorted[j].x + sorted[j].y)))
        .expect("four points");
    [sorted[tl], sorted[(tl + 1) % 4], sorted[(tl + 2) % 4], sorted[(tl + 3) % 4]]
}

/// Fits a quadrilateral to the outline of `mask` and returns its corners
/// ordered TL, TR, BR, BL.
pub fn front_face_corners(mask: &InstanceMask) -> Result<[P2; 4], PerceptionError> {
    let area = mask.area();
    if area < MIN_MASK_AREA {
        return Err(PerceptionError::DegenerateMask(format!("area {area} px below {MIN_MASK_AREA}")));
    }
    let pts = boundary_points(mask);
    let hull = convex_hull(&pts);
    if hull.len() < 3 {
        return Err(PerceptionError::DegenerateMask("outline is degenerate".into()));
    }
    let rect = min_area_rect(&hull);

    // Assign outline points to the nearest rectangle side, skipping points
    // close to a corner where the side is ambiguous.
    let mut sides: [Vec<P2>; 4] = Default::default();
    for p in &pts {
        let d: Vec<f64> = (0..4).map(|i| point_segment_distance(p, &rect[i], &rect[(i + 1) % 4])).collect();
        let near_corner = rect.iter().any(|c| (p - c).norm() < 2.5);
        if near_corner {
            continue;
        }
        let best = (0..4).min_by(|&i, &j| d[i].total_cmp(&d[j])).expect("four sides");
        sides[best].push(*p);
    }
    if sides.iter().any(|s| s.len() < MIN_SIDE_POINTS) {
        return Err(PerceptionError::DegenerateMask("a side has too few outline points".into()));
    }
    let lines: Vec<(P2, P2)> = sides.iter().map(|s| fit_line(s)).collect();

    let mut sq = 0.0;
    let mut n = 0usize;
    for (side, line) in sides.iter().zip(&lines) {
        for p in side {
            sq += (p - line.0).dot(&line.1).powi(2);
            n += 1;
        }
    }
    let rms = (sq / n as f64).sqrt();
    if rms > MAX_FIT_RESIDUAL {
        return Err(PerceptionError::DegenerateMask(format!("quadrilateral fit residual {rms:.2} px")));
    }

    let mut corners = [P2::zeros(); 4];
    for i in 0..4 {
        corners[i] = intersect(&lines[(i + 3) % 4], &lines[i])
            .ok_or_else(|| PerceptionError::DegenerateMask("parallel adjacent sides".into()))?;
    }
    Ok(order_corners(corners))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polygon_mask(corners: &[P2; 4]) -> InstanceMask {
        let inside = |p: P2| (0..4).all(|i| cross(&corners[i], &corners[(i + 1) % 4], &p) >= 0.0);
        let mut px = Vec::new();
        for y in 0..480u32 {
            for x in 0..640u32 {
                if inside(P2::new(x as f64, y as f64)) {
                    px.push((x, y));
                }
            }
        }
        InstanceMask::from_pixels(0, 1.0, 640, 480, &px)
    }

    #[test]
    fn axis_aligned_rectangle_is_exact() {
        let px: Vec<_> = (20..=40u32).flat_map(|y| (10..=60u32).map(move |x| (x, y))).collect();
        let mask = InstanceMask::from_pixels(0, 1.0, 640, 480, &px);
        let c = front_face_corners(&mask).unwrap();
        let expected = [P2::new(9.5, 19.5), P2::new(60.5, 19.5), P2::new(60.5, 40.5), P2::new(9.5, 40.5)];
        for (a, b) in c.iter().zip(&expected) {
            assert!((a - b).norm() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rotated_rectangle_within_half_pixel() {
        let (cx, cy) = (300.3, 200.7);
        let (hw, hh) = (40.0, 20.0);
        let th = 10f64.to_radians();
        let (s, c) = th.sin_cos();
        let rot = |x: f64, y: f64| P2::new(cx + c * x - s * y, cy + s * x + c * y);
        // Counter-clockwise in the cross-product sense used by polygon_mask.
        let truth = [rot(-hw, -hh), rot(hw, -hh), rot(hw, hh), rot(-hw, hh)];
        let mask = polygon_mask(&truth);
        let got = front_face_corners(&mask).unwrap();
        let expected = order_corners(truth);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).norm() < 0.5, "{a} vs {b}");
        }
    }

    #[test]
    fn small_blob_is_degenerate() {
        let px: Vec<_> = (0..40u32).map(|i| (100 + i % 8, 100 + i / 8)).collect();
        let mask = InstanceMask::from_pixels(0, 1.0, 640, 480, &px);
        assert!(matches!(front_face_corners(&mask), Err(PerceptionError::DegenerateMask(_))));
    }

    #[test]
    fn disc_is_not_a_quadrilateral() {
        let mut px = Vec::new();
        for y in 0..480u32 {
            for x in 0..640u32 {
                let (dx, dy) = (x as f64 - 200.0, y as f64 - 200.0);
                if dx * dx + dy * dy <= 40.0 * 40.0 {
                    px.push((x, y));
                }
            }
        }
        let mask = InstanceMask::from_pixels(0, 1.0, 640, 480, &px);
        assert!(matches!(front_face_corners(&mask), Err(PerceptionError::DegenerateMask(_))));
    }

    #[test]
    fn ordering_convention() {
        let pts = [P2::new(10.0, 10.0), P2::new(0.0, 10.0), P2::new(0.0, 0.0), P2::new(10.0, 0.0)];
        let o = order_corners(pts);
        assert_eq!(o, [P2::new(0.0, 0.0), P2::new(10.0, 0.0), P2::new(10.0, 10.0), P2::new(0.0, 10.0)]);
    }
}
