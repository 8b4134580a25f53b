//! ASCII point-cloud and ground-truth-pose files.
//!
//! Clouds: one `x y z` line per point, `#` comment lines ignored, 17
//! significant digits so coordinates round-trip exactly. Meta files: the 12
//! row-major rotation entries followed by the translation on one line.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::geometry::{PointCloud, RigidTransform};

use super::SynthError;

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<(), SynthError> {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud.iter() {
        out.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p.x, p.y, p.z));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, SynthError> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut coords = [0.0f64; 3];
        let mut fields = trimmed.split_whitespace();
        for c in coords.iter_mut() {
            *c = fields
                .next()
                .and_then(|f| f.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or(SynthError::Parse { path: display.clone(), line: idx + 1 })?;
        }
        if fields.next().is_some() {
            return Err(SynthError::Parse { path: display, line: idx + 1 });
        }
        points.push(Vector3::new(coords[0], coords[1], coords[2]));
    }
    if points.is_empty() {
        return Err(SynthError::EmptyFile { path: display });
    }
    Ok(PointCloud::new(points)?)
}

pub fn write_meta(transform: &RigidTransform, path: &Path) -> Result<(), SynthError> {
    let row = transform.to_row_major();
    let line = row.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ");
    fs::write(path, line + "\n")?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<RigidTransform, SynthError> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|f| f.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| SynthError::MalformedMeta { path: display.clone(), found: 0 })?;
    if values.len() != 12 {
        return Err(SynthError::MalformedMeta { path: display, found: values.len() });
    }
    let mut row = [0.0f64; 12];
    row.copy_from_slice(&values);
    Ok(RigidTransform::from_row_major(&row)?)
}
