//! Point-cloud primitives, rigid transforms, the weighted Procrustes solver,
//! ICP refinement, and registration metrics.

mod cloud;
mod icp;
mod knn;
mod metrics;
mod procrustes;
mod transform;
mod voxel;

pub use cloud::PointCloud;
pub use icp::{icp_refine, IcpParams, IcpResult};
pub use knn::{knn, IndexMatrix};
pub use metrics::{
    recall, rmse_mae_rotation_translation, ErrorStats, RecallSummary, RegistrationResult,
};
pub use procrustes::weighted_procrustes;
pub use transform::{apply_transform, rotation_error, translation_error, RigidTransform};
pub use voxel::voxel_downsample;

use thiserror::Error;

/// Errors raised by geometric operations.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("point coordinate is not finite")]
    NonFinitePoint,
    #[error("matrix is not a rotation (orthonormal with det +1 within 1e-9)")]
    InvalidRotation,
    #[error("k = {k} exceeds reference cloud size {size}")]
    KnnSize { k: usize, size: usize },
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("weight at index {0} is negative")]
    NegativeWeight(usize),
    #[error("weights sum to zero")]
    DegenerateWeights,
    #[error("weighted point pairs are rank deficient (collinear or coincident)")]
    RankDeficient,
    #[error("result set must be nonempty")]
    EmptyResults,
}
