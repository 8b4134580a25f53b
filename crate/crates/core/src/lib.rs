//! Rigid registration of partially overlapping 3D point clouds.
//!
//! The crate pairs a trainable point-matching network with a confidence
//! estimator: per-layer cross-attention matrices between the two clouds are
//! combined by pointwise product into global attention matrices, turned into
//! soft or sparse point correspondences, scored by a small point convnet, and
//! fed to a weighted Procrustes solver that recovers the rigid transform.
//! Training runs on a minimal reverse-mode autodiff engine over dense `f64`
//! tensors with an AdamW optimizer.
//!
//! Modules:
//! - [`geometry`]: point clouds, rigid transforms, Procrustes/ICP, metrics
//! - [`autodiff`]: tensor tape, differentiable ops, AdamW
//! - [`matching`]: the multi-layer cross-attention matching network
//! - [`confidence`]: per-pair confidence scoring and hard thresholding
//! - [`losses`]: ground-truth correspondences and training losses
//! - [`synth`]: synthetic partial-overlap pair generation and cloud file I/O

pub mod autodiff;
pub mod confidence;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod synth;
