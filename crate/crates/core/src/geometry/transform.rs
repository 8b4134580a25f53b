use nalgebra::{Matrix3, Unit, Vector3};

use super::{GeometryError, PointCloud};

/// Tolerance on `R^T R = I` and `det R = 1` for accepting a rotation matrix.
const ROTATION_TOL: f64 = 1e-9;

/// A rigid motion: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates orthonormality and a +1 determinant before accepting.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation);
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinitePoint);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation about `axis` by `angle` radians, then translation.
    pub fn from_axis_angle(
        axis: Vector3<f64>,
        angle: f64,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if axis.norm() == 0.0 {
            return Err(GeometryError::InvalidRotation);
        }
        let rotation = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self::new(rotation.into_inner(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Inverse motion: `R' = R^T`, `t' = -R^T t`.
    pub fn invert(&self) -> Self {
        let rotation = self.rotation.transpose();
        Self { rotation, translation: -(rotation * self.translation) }
    }

    /// `self` after `first`: `(self ∘ first)(p) = self(first(p))`.
    pub fn compose(&self, first: &Self) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Row-major rotation entries followed by the translation, the layout of
    /// `.meta` files and the `register` output line.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            self.translation.x, self.translation.y, self.translation.z,
        ]
    }

    pub fn from_row_major(values: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2],
            values[3], values[4], values[5],
            values[6], values[7], values[8],
        );
        Self::new(rotation, Vector3::new(values[9], values[10], values[11]))
    }
}

/// Applies `t` to every point; output point `i` is `R p_i + t`.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud::new(cloud.iter().map(|p| t.apply(p)).collect())
        .expect("transforming a valid cloud preserves validity")
}

/// Geodesic rotation distance `acos[(tr(R_gt^T R_est) - 1) / 2]` in radians.
///
/// The trace is computed as an elementwise product sum, which makes the
/// result exactly symmetric in its arguments; the `acos` argument is clamped
/// to `[-1, 1]` to absorb round-off.
pub fn rotation_error(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let trace: f64 = r_est.iter().zip(r_gt.iter()).map(|(a, b)| a * b).sum();
    (((trace - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// Euclidean distance between the two translation vectors.
pub fn translation_error(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_est - t_gt).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let t = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        RigidTransform::from_axis_angle(axis, angle, t).unwrap()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let cloud = PointCloud::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]]).unwrap();
        let out = apply_transform(&cloud, &RigidTransform::identity());
        assert_eq!(out, cloud);
    }

    #[test]
    fn quarter_turn_about_z() {
        let cloud = PointCloud::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let t = RigidTransform::from_axis_angle(
            Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::zeros(),
        )
        .unwrap();
        let out = apply_transform(&cloud, &t);
        assert_abs_diff_eq!(out.point(0), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn inverse_round_trips_points() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let cloud = random_cloud(&mut rng, 16);
            let t = random_transform(&mut rng);
            let back = apply_transform(&apply_transform(&cloud, &t), &t.invert());
            for (a, b) in back.iter().zip(cloud.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invert_identity_and_translation() {
        let id = RigidTransform::identity().invert();
        assert_eq!(id.rotation(), &Matrix3::identity());
        assert_eq!(id.translation(), &Vector3::zeros());

        let t = RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0))
            .unwrap()
            .invert();
        assert_eq!(t.translation(), &Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(t.rotation(), &Matrix3::identity());
    }

    #[test]
    fn double_inverse_is_identity_map() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let t = random_transform(&mut rng);
            let tt = t.invert().invert();
            assert_abs_diff_eq!(tt.rotation(), t.rotation(), epsilon = 1e-12);
            assert_abs_diff_eq!(tt.translation(), t.translation(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_error_zero_and_pi() {
        let mut rng = StdRng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        assert_eq!(rotation_error(t.rotation(), t.rotation()), 0.0);

        let half_turn =
            RigidTransform::from_axis_angle(Vector3::y(), std::f64::consts::PI, Vector3::zeros())
                .unwrap();
        let flipped = half_turn.compose(&t);
        assert_abs_diff_eq!(
            rotation_error(flipped.rotation(), t.rotation()),
            std::f64::consts::PI,
            epsilon = 1e-9
        );
    }

    #[test]
    fn rotation_error_matches_constructed_angle() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let base = random_transform(&mut rng);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f64),
            );
            let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis };
            let extra = RigidTransform::from_axis_angle(axis, theta, Vector3::zeros()).unwrap();
            let rotated = extra.compose(&base);
            assert_abs_diff_eq!(
                rotation_error(rotated.rotation(), base.rotation()),
                theta,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn rotation_error_is_symmetric() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            assert_eq!(
                rotation_error(a.rotation(), b.rotation()),
                rotation_error(b.rotation(), a.rotation())
            );
        }
    }

    #[test]
    fn translation_error_pythagorean() {
        assert_eq!(translation_error(&Vector3::new(3.0, 4.0, 0.0), &Vector3::zeros()), 5.0);
        let v = Vector3::new(0.1, -0.2, 0.3);
        assert_eq!(translation_error(&v, &v), 0.0);
    }

    #[test]
    fn translation_error_matches_componentwise_formula() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let a = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let b = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let expected =
                ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            assert_abs_diff_eq!(translation_error(&a, &b), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn row_major_round_trip() {
        let mut rng = StdRng::seed_from_u64(17);
        let t = random_transform(&mut rng);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(&back, &t);
    }

    #[test]
    fn rejects_non_rotation() {
        let scaled = Matrix3::identity() * 1.5;
        assert!(RigidTransform::new(scaled, Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflection, Vector3::zeros()).is_err());
    }
}
