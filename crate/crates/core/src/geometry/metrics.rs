use nalgebra::Matrix3;

use super::{rotation_error, translation_error, GeometryError, RigidTransform};

/// Outcome of registering one pair against its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub ground_truth: RigidTransform,
    /// Translation error in scene units.
    pub te: f64,
    /// Rotation error in radians, in `[0, pi]`.
    pub re: f64,
    /// Whether both errors fell under the thresholds this result was
    /// evaluated with.
    pub success: bool,
}

impl RegistrationResult {
    pub fn evaluate(
        transform: RigidTransform,
        ground_truth: RigidTransform,
        te_max: f64,
        re_max: f64,
    ) -> Self {
        let te = translation_error(transform.translation(), ground_truth.translation());
        let re = rotation_error(transform.rotation(), ground_truth.rotation());
        Self { transform, ground_truth, te, re, success: te <= te_max && re <= re_max }
    }
}

/// The five reported registration statistics: success fraction, error means
/// over all pairs, and error means over successful pairs only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallSummary {
    pub recall: f64,
    pub te_all: f64,
    pub re_all: f64,
    /// Mean translation error over successful pairs; 0 when none succeeded.
    pub te: f64,
    /// Mean rotation error over successful pairs; 0 when none succeeded.
    pub re: f64,
}

/// Fraction of registrations with `TE <= te_max` and `RE <= re_max`
/// (`re_max` in radians), plus the error means over all and over successful
/// pairs.
pub fn recall(
    results: &[RegistrationResult],
    te_max: f64,
    re_max: f64,
) -> Result<RecallSummary, GeometryError> {
    if results.is_empty() {
        return Err(GeometryError::EmptyResults);
    }
    let n = results.len() as f64;
    let mut te_all = 0.0;
    let mut re_all = 0.0;
    let mut te_ok = 0.0;
    let mut re_ok = 0.0;
    let mut successes = 0usize;
    for r in results {
        te_all += r.te;
        re_all += r.re;
        if r.te <= te_max && r.re <= re_max {
            successes += 1;
            te_ok += r.te;
            re_ok += r.re;
        }
    }
    let (te, re) = if successes > 0 {
        (te_ok / successes as f64, re_ok / successes as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(RecallSummary {
        recall: successes as f64 / n,
        te_all: te_all / n,
        re_all: re_all / n,
        te,
        re,
    })
}

/// RMSE/MAE of rotation (degrees) and translation residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub rmse_rotation_deg: f64,
    pub mae_rotation_deg: f64,
    pub rmse_translation: f64,
    pub mae_translation: f64,
}

/// Intrinsic Z-Y-X Euler angles of a rotation matrix, in radians.
///
/// For `R = Rz(a) Ry(b) Rx(c)`: `b = asin(-R[2][0])`, `a = atan2(R10, R00)`,
/// `c = atan2(R21, R22)`, with the usual gimbal-lock fallback at |b| = pi/2.
fn euler_zyx(r: &Matrix3<f64>) -> [f64; 3] {
    let sin_b = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let b = sin_b.asin();
    if (1.0 - sin_b.abs()) > 1e-12 {
        let a = r[(1, 0)].atan2(r[(0, 0)]);
        let c = r[(2, 1)].atan2(r[(2, 2)]);
        [a, b, c]
    } else {
        // cos(b) = 0: only a -/+ c is determined; conventionally c = 0.
        let a = (-r[(0, 1)]).atan2(r[(1, 1)]);
        [a, b, 0.0]
    }
}

/// Rotation statistics over the three Z-Y-X Euler angles (in degrees) of the
/// residual `R_gt^T R_est`, and translation statistics componentwise over
/// `t_est - t_gt`. Each of the `3 n` residual components counts once.
///
/// The per-Euler-angle convention is a local choice; geodesic-angle variants
/// exist and would differ for large residuals.
pub fn rmse_mae_rotation_translation(
    results: &[RegistrationResult],
) -> Result<ErrorStats, GeometryError> {
    if results.is_empty() {
        return Err(GeometryError::EmptyResults);
    }
    let mut sq_r = 0.0;
    let mut abs_r = 0.0;
    let mut sq_t = 0.0;
    let mut abs_t = 0.0;
    for r in results {
        let residual = r.ground_truth.rotation().transpose() * r.transform.rotation();
        for angle in euler_zyx(&residual) {
            let deg = angle.to_degrees();
            sq_r += deg * deg;
            abs_r += deg.abs();
        }
        let dt = r.transform.translation() - r.ground_truth.translation();
        for c in dt.iter() {
            sq_t += c * c;
            abs_t += c.abs();
        }
    }
    let m = (3 * results.len()) as f64;
    Ok(ErrorStats {
        rmse_rotation_deg: (sq_r / m).sqrt(),
        mae_rotation_deg: abs_r / m,
        rmse_translation: (sq_t / m).sqrt(),
        mae_translation: abs_t / m,
    })
}
