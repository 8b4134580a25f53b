use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::{GeometryError, PointCloud};

/// Collapses the cloud onto a regular grid, keeping one centroid per
/// occupied voxel. Output order is ascending integer voxel key, z-major,
/// then y, then x, which makes the result deterministic.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud, GeometryError> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(GeometryError::InvalidVoxelSize(voxel_size));
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in cloud.iter() {
        let key = (
            (p.z / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.x / voxel_size).floor() as i64,
        );
        let entry = cells.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    PointCloud::new(cells.into_values().map(|(sum, n)| sum / n as f64).collect())
}
