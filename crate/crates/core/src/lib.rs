//! Simulation of a vision- and force-guided arm playing Jenga: tower physics,
//! mask-based perception, 2½-D visual servoing, force-threshold push
//! classification and the block-selection policy.

pub mod force;
pub mod geometry;
pub mod perception;
pub mod policy;
pub mod rng;
pub mod servo;
pub mod tower;
