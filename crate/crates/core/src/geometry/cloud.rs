use nalgebra::Vector3;

use super::GeometryError;

/// An ordered set of 3D points. Indices are stable: correspondences,
/// neighborhoods and attention matrices all refer to points by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    /// Builds a cloud from points, rejecting empty input and non-finite
    /// coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinitePoint);
        }
        Ok(Self { points })
    }

    /// Builds a cloud from `[x, y, z]` triples.
    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self, GeometryError> {
        Self::new(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false: the empty cloud is rejected at construction.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> Vector3<f64> {
        self.points[index]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    /// Row-major coordinate buffer (n x 3), the network input layout.
    pub fn flat_coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.extend_from_slice(&[p.x, p.y, p.z]);
        }
        out
    }

    /// Keeps the points selected by `mask`, preserving order.
    pub fn filter(&self, mask: &[bool]) -> Result<Self, GeometryError> {
        if mask.len() != self.points.len() {
            return Err(GeometryError::LengthMismatch(mask.len(), self.points.len()));
        }
        Self::new(
            self.points
                .iter()
                .zip(mask)
                .filter(|(_, keep)| **keep)
                .map(|(p, _)| *p)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_cloud() {
        assert!(matches!(PointCloud::new(vec![]), Err(GeometryError::EmptyCloud)));
    }

    #[test]
    fn rejects_non_finite() {
        let result = PointCloud::from_rows(&[[0.0, f64::NAN, 0.0]]);
        assert!(matches!(result, Err(GeometryError::NonFinitePoint)));
    }

    #[test]
    fn centroid_of_unit_triangle() {
        let cloud =
            PointCloud::from_rows(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]]).unwrap();
        assert_eq!(cloud.centroid(), Vector3::new(1.0, 1.0, 0.0));
    }
}
