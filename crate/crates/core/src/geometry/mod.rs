//! Manifold math, point clouds, normal estimation and nearest-neighbor search.

mod cloud;
mod kdtree;
mod normals;
mod se3;

pub use cloud::{voxel_downsample, voxel_key, PointCloud};
pub use kdtree::{Neighbor, SpatialIndex};
pub use normals::{
    canonical_sign, estimate_normals, estimate_normals_with_index, neighborhood_normal, sorted_eigen3, NormalQuality,
    DEFAULT_NORMAL_NEIGHBORS, FLATNESS_GATE,
};
pub use se3::{
    between, compose, exp_map, hat, inverse, log_map, orthonormalize_rotation, rot_z, se3_left_jacobian,
    se3_left_jacobian_inv, so3_exp, so3_left_jacobian, so3_left_jacobian_inv, so3_log, so3_right_jacobian,
    so3_right_jacobian_inv, Pose, Twist,
};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud too large for the index ({0} points)")]
    TooManyPoints(usize),
    #[error("normal estimation needs k >= 3 neighbors, got {k}")]
    TooFewNeighbors { k: usize },
    #[error("cloud has {have} points but {need} neighbors were requested")]
    NotEnoughPoints { have: usize, need: usize },
}
