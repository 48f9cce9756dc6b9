//! Perception: synthetic instance masks standing in for a segmentation
//! network, corner extraction, planar pose estimation, model-based tracking
//! with a noise model, and mask AP evaluation.

mod corners;
mod maskio;
mod metrics;
mod pnp;
mod render;
mod track;

pub use corners::{front_face_corners, MIN_MASK_AREA};
pub use maskio::{parse_mask_file, write_mask_file, MaskImage};
pub use metrics::{ap_at_iou, ap_at_iou_images, mask_iou};
pub use pnp::{planar_pnp, reprojection_error};
pub use render::{corrupt_masks, render_masks, InstanceMask, MaskNoise};
pub use track::{
    build_group_model, feature_points, single_block_model, track_step, tracker_reinitialize, true_face_in_camera, GroupMember,
    GroupModel, TrackNoise, TrackState, TrackStatus,
};

use crate::geometry::{Mat3, RigidPose, Vec3};
use crate::tower::{BlockId, TowerError, TowerState};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("ill-conditioned pose problem: {0}")]
    IllConditioned(String),
    #[error("target block {0} is not visible")]
    TargetNotVisible(BlockId),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Tower(#[from] TowerError),
}

/// Pose in the tower frame of the front face of a block: the end face on
/// the block's +x side. Face frame: origin at the face centre, z into the
/// block, x horizontal, y pointing down.
pub fn front_face_pose(tower: &TowerState, id: BlockId) -> Result<RigidPose, TowerError> {
    let block = tower.block_pose(id)?;
    let half = tower.config.block.length / 2.0;
    let r = Mat3::from_columns(&[Vec3::y(), -Vec3::z(), -Vec3::x()]);
    Ok(block.compose(&RigidPose {
        rotation: r,
        translation: Vec3::new(half, 0.0, 0.0),
    }))
}

/// Width and height of a block's front face (m).
pub fn front_face_dims(tower: &TowerState) -> (f64, f64) {
    (tower.config.block.width, tower.config.block.height)
}

/// Camera pose (tower frame) looking straight at the front face of `id`
/// from `distance` metres.
pub fn facing_camera_pose(tower: &TowerState, id: BlockId, distance: f64) -> Result<RigidPose, TowerError> {
    Ok(front_face_pose(tower, id)?.compose(&RigidPose::from_translation(Vec3::new(0.0, 0.0, -distance))))
}
