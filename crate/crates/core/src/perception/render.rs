use crate::geometry::{CameraIntrinsics, RigidPose, Vec3};
use crate::rng::{mix, stream, stream_rng};
use crate::tower::{BlockId, TowerState};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Binary mask of one block instance, stored as a bounding box plus a
/// row-major bitmap of that box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub block_id: BlockId,
    pub confidence: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
    pub bits: Vec<bool>,
}

impl InstanceMask {
    /// Builds a mask from a full-image bitmap, cropping to the occupied box.
    pub fn from_full(block_id: BlockId, confidence: f64, width: u32, height: u32, full: &[bool]) -> Self {
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..height {
            for x in 0..width {
                if full[(y * width + x) as usize] {
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                }
            }
        }
        if xmin == u32::MAX {
            return InstanceMask {
                block_id,
                confidence,
                image_width: width,
                image_height: height,
                x0: 0,
                y0: 0,
                w: 0,
                h: 0,
                bits: Vec::new(),
            };
        }
        let (w, h) = (xmax - xmin + 1, ymax - ymin + 1);
        let mut bits = Vec::with_capacity((w * h) as usize);
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                bits.push(full[(y * width + x) as usize]);
            }
        }
        InstanceMask {
            block_id,
            confidence,
            image_width: width,
            image_height: height,
            x0: xmin,
            y0: ymin,
            w,
            h,
            bits,
        }
    }

    pub fn from_pixels(block_id: BlockId, confidence: f64, width: u32, height: u32, pixels: &[(u32, u32)]) -> Self {
        let mut full = vec![false; (width * height) as usize];
        for &(x, y) in pixels {
            if x < width && y < height {
                full[(y * width + x) as usize] = true;
            }
        }
        Self::from_full(block_id, confidence, width, height, &full)
    }

    pub fn to_full(&self) -> Vec<bool> {
        let mut full = vec![false; (self.image_width * self.image_height) as usize];
        for (x, y) in self.pixels() {
            full[(y * self.image_width + x) as usize] = true;
        }
        full
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Whether pixel `(x, y)` of the image belongs to the mask.
    pub fn get(&self, x: i64, y: i64) -> bool {
        let (lx, ly) = (x - self.x0 as i64, y - self.y0 as i64);
        if lx < 0 || ly < 0 || lx >= self.w as i64 || ly >= self.h as i64 {
            return false;
        }
        self.bits[(ly * self.w as i64 + lx) as usize]
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| {
            let i = i as u32;
            (self.x0 + i % self.w, self.y0 + i / self.w)
        })
    }
}

/// Slab test of a ray against an axis-aligned box centred at the origin.
/// Returns the entry distance when the ray hits in front of its origin.
fn ray_box(o: &Vec3, d: &Vec3, half: &Vec3) -> Option<f64> {
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let t1 = (-half[i] - o[i]) / d[i];
        let t2 = (half[i] - o[i]) / d[i];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

/// Renders one mask per visible block as seen from `camera` (camera pose
/// in the tower frame). A pixel belongs to the nearest block hit by the ray
/// through its centre, so masks never overlap and hidden blocks are absent.
pub fn render_masks(camera: &RigidPose, k: &CameraIntrinsics, tower: &TowerState) -> Vec<InstanceMask> {
    let (width, height) = (k.width as usize, k.height as usize);
    let mut depth = vec![f64::INFINITY; width * height];
    let mut owner: Vec<Option<BlockId>> = vec![None; width * height];
    let dims = &tower.config.block;
    let half = Vec3::new(dims.length / 2.0, dims.width / 2.0, dims.height / 2.0);
    let cam_inv = camera.inverse();

    for block in tower.blocks.iter().filter(|b| b.status.in_tower()) {
        let Ok(pose) = tower.block_pose(block.id) else { continue };
        // Projected bounding box of the eight corners.
        let mut bbox = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut behind = false;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let corner = pose.transform_point(&Vec3::new(sx * half.x, sy * half.y, sz * half.z));
                    let pc = cam_inv.transform_point(&corner);
                    if pc.z <= 1e-6 {
                        behind = true;
                        continue;
                    }
                    let u = k.fx * pc.x / pc.z + k.cx;
                    let v = k.fy * pc.y / pc.z + k.cy;
                    bbox = (bbox.0.min(u), bbox.1.min(v), bbox.2.max(u), bbox.3.max(v));
                }
            }
        }
        if behind {
            continue;
        }
        let x_lo = bbox.0.floor().max(0.0) as usize;
        let y_lo = bbox.1.floor().max(0.0) as usize;
        let x_hi = (bbox.2.ceil() as i64).min(width as i64 - 1);
        let y_hi = (bbox.3.ceil() as i64).min(height as i64 - 1);
        if x_hi < x_lo as i64 || y_hi < y_lo as i64 {
            continue;
        }
        let rb_t = pose.rotation.transpose();
        let origin = rb_t * (camera.translation - pose.translation);
        let m = rb_t * camera.rotation;
        for y in y_lo..=y_hi as usize {
            for x in x_lo..=x_hi as usize {
                let ray_cam = Vec3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                if let Some(t) = ray_box(&origin, &(m * ray_cam), &half) {
                    let idx = y * width + x;
                    if t < depth[idx] {
                        depth[idx] = t;
                        owner[idx] = Some(block.id);
                    }
                }
            }
        }
    }

    let mut pixels: std::collections::BTreeMap<BlockId, Vec<(u32, u32)>> = Default::default();
    for (idx, o) in owner.iter().enumerate() {
        if let Some(id) = o {
            pixels.entry(*id).or_default().push(((idx % width) as u32, (idx / width) as u32));
        }
    }
    pixels
        .into_iter()
        .map(|(id, px)| InstanceMask::from_pixels(id, 1.0, k.width, k.height, &px))
        .collect()
}

/// Degradations applied to oracle masks to imitate a trained segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNoise {
    /// Standard deviation of the smooth boundary displacement (px).
    pub jitter_sigma: f64,
    /// Probability that a mask is missed entirely.
    pub dropout: f64,
    /// Spread of the confidence score around the mask quality.
    pub confidence_sigma: f64,
}

impl Default for MaskNoise {
    fn default() -> Self {
        MaskNoise {
            jitter_sigma: 1.0,
            dropout: 0.02,
            confidence_sigma: 0.1,
        }
    }
}

impl MaskNoise {
    pub fn none() -> Self {
        MaskNoise {
            jitter_sigma: 0.0,
            dropout: 0.0,
            confidence_sigma: 0.0,
        }
    }
}

/// Two-pass chamfer distance (in pixels) from every cell to the nearest
/// cell where `target` is true.
fn chamfer(grid: &[bool], w: usize, h: usize, target: bool) -> Vec<f64> {
    const D1: f64 = 1.0;
    const D2: f64 = std::f64::consts::SQRT_2;
    let mut d: Vec<f64> = grid.iter().map(|&g| if g == target { 0.0 } else { f64::INFINITY }).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = d[i];
            if x > 0 {
                v = v.min(d[i - 1] + D1);
            }
            if y > 0 {
                v = v.min(d[i - w] + D1);
                if x > 0 {
                    v = v.min(d[i - w - 1] + D2);
                }
                if x + 1 < w {
                    v = v.min(d[i - w + 1] + D2);
                }
            }
            d[i] = v;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            let mut v = d[i];
            if x + 1 < w {
                v = v.min(d[i + 1] + D1);
            }
            if y + 1 < h {
                v = v.min(d[i + w] + D1);
                if x + 1 < w {
                    v = v.min(d[i + w + 1] + D2);
                }
                if x > 0 {
                    v = v.min(d[i + w - 1] + D2);
                }
            }
            d[i] = v;
        }
    }
    d
}

/// Moves each mask boundary by a smooth random displacement field, drops
/// masks at random and rescores confidences by the resulting mask quality.
pub fn corrupt_masks(masks: &[InstanceMask], noise: &MaskNoise, seed: u64) -> Vec<InstanceMask> {
    let mut out = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let mut rng = stream_rng(mix(seed, i as u64), stream::MASKS);
        if noise.dropout > 0.0 && rng.random_bool(noise.dropout.min(1.0)) {
            continue;
        }
        let jittered = if noise.jitter_sigma > 0.0 {
            jitter(mask, noise.jitter_sigma, &mut rng)
        } else {
            mask.clone()
        };
        if jittered.is_empty() {
            continue;
        }
        let quality = super::mask_iou(mask, &jittered);
        let spread = if noise.confidence_sigma > 0.0 {
            Normal::new(0.0, noise.confidence_sigma).expect("sigma checked").sample(&mut rng)
        } else {
            0.0
        };
        let confidence = (mask.confidence * quality + spread).clamp(0.0, 1.0);
        out.push(InstanceMask { confidence, ..jittered });
    }
    out
}

fn jitter(mask: &InstanceMask, sigma: f64, rng: &mut impl Rng) -> InstanceMask {
    const WAVES: usize = 4;
    let margin = (4.0 * sigma).ceil() as i64 + 2;
    let x_lo = (mask.x0 as i64 - margin).max(0);
    let y_lo = (mask.y0 as i64 - margin).max(0);
    let x_hi = (mask.x0 as i64 + mask.w as i64 + margin).min(mask.image_width as i64);
    let y_hi = (mask.y0 as i64 + mask.h as i64 + margin).min(mask.image_height as i64);
    let (w, h) = ((x_hi - x_lo) as usize, (y_hi - y_lo) as usize);
    let grid: Vec<bool> = (0..w * h)
        .map(|i| mask.get(x_lo + (i % w) as i64, y_lo + (i / w) as i64))
        .collect();
    let to_outside = chamfer(&grid, w, h, false);
    let to_inside = chamfer(&grid, w, h, true);

    // Sum of plane waves with total variance sigma^2.
    let amp = sigma * (2.0 / WAVES as f64).sqrt();
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let freq = rng.random_range(0.1..0.4);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();

    let mut pixels = Vec::new();
    for i in 0..w * h {
        let (x, y) = ((x_lo + (i % w) as i64) as f64, (y_lo + (i / w) as i64) as f64);
        let signed = if grid[i] { to_outside[i] - 0.5 } else { 0.5 - to_inside[i] };
        let offset: f64 = waves.iter().map(|&(fx, fy, p, a)| a * (fx * x + fy * y + p).sin()).sum();
        if signed + offset > 0.0 {
            pixels.push((x as u32, y as u32));
        }
    }
    InstanceMask::from_pixels(mask.block_id, mask.confidence, mask.image_width, mask.image_height, &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{facing_camera_pose, mask_iou};
    use crate::tower::{new_tower, TowerConfig};

    fn square(x0: u32, y0: u32, side: u32) -> InstanceMask {
        let px: Vec<_> = (y0..y0 + side).flat_map(|y| (x0..x0 + side).map(move |x| (x, y))).collect();
        InstanceMask::from_pixels(0, 1.0, 640, 480, &px)
    }

    #[test]
    fn bitmap_round_trip() {
        let m = square(10, 20, 5);
        assert_eq!(m.area(), 25);
        assert_eq!((m.x0, m.y0, m.w, m.h), (10, 20, 5, 5));
        assert!(m.get(10, 20) && m.get(14, 24) && !m.get(15, 24) && !m.get(-1, 0));
        let back = InstanceMask::from_full(0, 1.0, 640, 480, &m.to_full());
        assert_eq!(back, m);
    }

    #[test]
    fn facing_view_shows_front_faces_only() {
        let tower = new_tower(&TowerConfig::default(), 1).unwrap();
        let k = CameraIntrinsics::default();
        let target = tower.layers[8][1].unwrap();
        let cam = facing_camera_pose(&tower, target, 0.3).unwrap();
        let masks = render_masks(&cam, &k, &tower);
        let in_target_level = masks.iter().filter(|m| tower.blocks[m.block_id].level == 9).count();
        assert!(in_target_level <= 3);
        // Perpendicular levels: only the block nearest the camera is seen.
        for level in [8, 10] {
            let seen: Vec<_> = masks.iter().filter(|m| tower.blocks[m.block_id].level == level).collect();
            assert_eq!(seen.len(), 1, "level {level}");
        }
        // Disjointness.
        let mut hits = vec![0u8; 640 * 480];
        for m in &masks {
            for (x, y) in m.pixels() {
                hits[(y * 640 + x) as usize] += 1;
            }
        }
        assert!(hits.iter().all(|&c| c <= 1));
    }

    #[test]
    fn front_face_area_matches_projection() {
        let tower = new_tower(&TowerConfig::default(), 1).unwrap();
        let k = CameraIntrinsics::default();
        let target = tower.layers[8][1].unwrap();
        let cam = facing_camera_pose(&tower, target, 0.3).unwrap();
        let masks = render_masks(&cam, &k, &tower);
        let m = masks.iter().find(|m| m.block_id == target).unwrap();
        let analytic = (k.fx * 0.025 / 0.3) * (k.fy * 0.015 / 0.3);
        let rel = (m.area() as f64 - analytic).abs() / analytic;
        assert!(rel < 0.02, "area {} vs {analytic}", m.area());
    }

    #[test]
    fn hidden_blocks_are_absent() {
        let tower = new_tower(&TowerConfig::default(), 1).unwrap();
        let k = CameraIntrinsics::default();
        let cam = facing_camera_pose(&tower, tower.layers[9][1].unwrap(), 0.3).unwrap();
        let masks = render_masks(&cam, &k, &tower);
        // Level 9 is perpendicular to level 10: its two far blocks hide behind the near one.
        let near_far: Vec<_> = tower.layers[8].iter().flatten().copied().collect();
        let visible = masks.iter().filter(|m| near_far.contains(&m.block_id)).count();
        assert_eq!(visible, 1);
    }

    #[test]
    fn corruption_contract() {
        let masks: Vec<_> = (0..10).map(|i| square(20 + 60 * i, 100, 40)).collect();
        assert_eq!(corrupt_masks(&masks, &MaskNoise::none(), 3), masks);
        let all_gone = MaskNoise {
            dropout: 1.0,
            ..MaskNoise::none()
        };
        assert!(corrupt_masks(&masks, &all_gone, 3).is_empty());
        let noisy = MaskNoise::default();
        assert_eq!(corrupt_masks(&masks, &noisy, 9), corrupt_masks(&masks, &noisy, 9));
    }

    #[test]
    fn two_pixel_jitter_iou_band() {
        let tower = new_tower(&TowerConfig::default(), 1).unwrap();
        let k = CameraIntrinsics::default();
        let cam = facing_camera_pose(&tower, tower.layers[8][1].unwrap(), 0.3).unwrap();
        let masks = render_masks(&cam, &k, &tower);
        let noise = MaskNoise {
            jitter_sigma: 2.0,
            dropout: 0.0,
            confidence_sigma: 0.0,
        };
        let mut ious = Vec::new();
        for seed in 0..10 {
            let out = corrupt_masks(&masks, &noise, seed);
            for m in &out {
                let orig = masks.iter().find(|o| o.block_id == m.block_id).unwrap();
                if orig.area() > 500 {
                    ious.push(mask_iou(orig, m));
                }
            }
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((0.7..=0.95).contains(&mean), "mean IoU {mean}");
    }
}
