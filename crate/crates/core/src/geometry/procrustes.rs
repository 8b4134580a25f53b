use nalgebra::{Matrix3, Vector3, SVD};

use super::{GeometryError, PointCloud, RigidTransform};

/// Relative threshold below which the second singular value of the weighted
/// cross-covariance marks the problem as rank deficient (collinear or
/// coincident weighted points), leaving the rotation underdetermined.
const RANK_TOL: f64 = 1e-12;

/// Solves `min_{R,t} Σ_i w_i ||R src_i + t - dst_i||²` in closed form.
///
/// Weights are normalized internally so that any positive rescaling of `w`
/// returns the same transform. The rotation comes from the SVD of the
/// weighted cross-covariance; when `det(U V^T) < 0` the column of `V`
/// associated with the smallest singular value is negated so that the result
/// is a proper rotation.
pub fn weighted_procrustes(
    src: &PointCloud,
    dst: &PointCloud,
    weights: &[f64],
) -> Result<RigidTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if weights.len() != src.len() {
        return Err(GeometryError::LengthMismatch(weights.len(), src.len()));
    }
    if let Some(i) = weights.iter().position(|w| *w < 0.0 || !w.is_finite()) {
        return Err(GeometryError::NegativeWeight(i));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(GeometryError::DegenerateWeights);
    }

    let mut mu_src = Vector3::zeros();
    let mut mu_dst = Vector3::zeros();
    for ((p, q), w) in src.iter().zip(dst.iter()).zip(weights) {
        mu_src += (w / total) * p;
        mu_dst += (w / total) * q;
    }

    let mut covariance = Matrix3::zeros();
    for ((p, q), w) in src.iter().zip(dst.iter()).zip(weights) {
        covariance += (w / total) * (p - mu_src) * (q - mu_dst).transpose();
    }

    let svd = SVD::new(covariance, true, true);
    let u = svd.u.ok_or(GeometryError::RankDeficient)?;
    let v_t = svd.v_t.ok_or(GeometryError::RankDeficient)?;
    let sigma = svd.singular_values;

    // nalgebra does not promise sorted singular values; find the extremes.
    let mut largest = 0;
    let mut smallest = 0;
    for i in 1..3 {
        if sigma[i] > sigma[largest] {
            largest = i;
        }
        if sigma[i] < sigma[smallest] {
            smallest = i;
        }
    }
    let middle = 3 - largest - smallest;
    let (sig_max, sig_mid) = if largest == smallest {
        (sigma[0], sigma[0])
    } else {
        (sigma[largest], sigma[middle])
    };
    if sig_max <= 0.0 || sig_mid <= RANK_TOL * sig_max {
        return Err(GeometryError::RankDeficient);
    }

    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        for r in 0..3 {
            v[(r, smallest)] = -v[(r, smallest)];
        }
    }
    let rotation = v * u.transpose();
    let translation = mu_dst - rotation * mu_src;
    RigidTransform::new(rotation, translation)
}
