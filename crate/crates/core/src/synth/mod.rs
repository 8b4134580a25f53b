//! Synthetic partial-overlap registration pairs: scene generation, half-space
//! cropping with exact overlap accounting, pose sampling, and dataset
//! iteration over disjoint per-split seed ranges.

pub mod io;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::{apply_transform, GeometryError, PointCloud, RigidTransform};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: expected three finite coordinates")]
    Parse { path: String, line: usize },
    #[error("{path}: cloud file holds no points")]
    EmptyFile { path: String },
    #[error("{path}: meta file must hold 12 numbers, found {found}")]
    MalformedMeta { path: String, found: usize },
}

/// Scene geometry families; each produces clouds of roughly unit extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Five faces of a unit box plus furniture-like box protrusions.
    BoxRoom,
    /// Unions of sphere shells.
    MultiSphere,
    /// Planar patches with Gaussian clusters; deliberately ambiguous.
    PlaneClusters,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "box-room" => Some(Self::BoxRoom),
            "multi-sphere" => Some(Self::MultiSphere),
            "plane-clusters" => Some(Self::PlaneClusters),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BoxRoom => "box-room",
            Self::MultiSphere => "multi-sphere",
            Self::PlaneClusters => "plane-clusters",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Scene point count before cropping into views.
    pub n_points: usize,
    /// Lower bound on each view's realized overlap fraction, in (0, 1].
    pub overlap_target: f64,
    /// Maximum rotation angle of the sampled pose, radians.
    pub rotation_max: f64,
    /// Translation sampled uniformly in a ball of this radius.
    pub translation_max: f64,
    /// Isotropic Gaussian noise added to both views.
    pub noise_sigma: f64,
    pub shape_kind: ShapeKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 384,
            overlap_target: 0.5,
            rotation_max: 45f64.to_radians(),
            translation_max: 0.5,
            noise_sigma: 0.005,
            shape_kind: ShapeKind::BoxRoom,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_points < 32 {
            return Err(SynthError::InvalidConfig(format!(
                "n_points must be at least 32, got {}",
                self.n_points
            )));
        }
        if !(self.overlap_target > 0.0 && self.overlap_target <= 1.0) {
            return Err(SynthError::InvalidConfig(format!(
                "overlap_target must be in (0, 1], got {}",
                self.overlap_target
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        if self.rotation_max < 0.0 || self.translation_max < 0.0 {
            return Err(SynthError::InvalidConfig("pose bounds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One training/evaluation item: two views, the ground-truth pose mapping P
/// onto Q, and per-point overlap-region membership masks.
#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub t_gt: RigidTransform,
    pub overlap_mask_p: Vec<bool>,
    pub overlap_mask_q: Vec<bool>,
    pub seed: u64,
}

impl RegistrationPair {
    pub fn overlap_fraction_p(&self) -> f64 {
        self.overlap_mask_p.iter().filter(|&&b| b).count() as f64
            / self.overlap_mask_p.len() as f64
    }

    pub fn overlap_fraction_q(&self) -> f64 {
        self.overlap_mask_q.iter().filter(|&&b| b).count() as f64
            / self.overlap_mask_q.len() as f64
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn scene_box_room(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    // Furniture: a few axis-aligned boxes standing on the floor.
    let n_boxes = rng.gen_range(2..=4);
    let boxes: Vec<(Vector3<f64>, Vector3<f64>)> = (0..n_boxes)
        .map(|_| {
            let size = Vector3::new(
                rng.gen_range(0.1..0.3),
                rng.gen_range(0.1..0.3),
                rng.gen_range(0.15..0.45),
            );
            let origin = Vector3::new(
                rng.gen_range(0.05..0.95 - size.x),
                rng.gen_range(0.05..0.95 - size.y),
                0.0,
            );
            (origin, size)
        })
        .collect();

    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.gen_bool(0.6) {
            // Room shell: floor or one of four walls.
            let face = rng.gen_range(0..5);
            let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
            points.push(match face {
                0 => Vector3::new(a, b, 0.0),
                1 => Vector3::new(0.0, a, b),
                2 => Vector3::new(1.0, a, b),
                3 => Vector3::new(a, 0.0, b),
                _ => Vector3::new(a, 1.0, b),
            });
        } else {
            let (origin, size) = boxes[rng.gen_range(0..boxes.len())];
            let face = rng.gen_range(0..5);
            let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
            points.push(match face {
                0 => origin + Vector3::new(a * size.x, b * size.y, size.z),
                1 => origin + Vector3::new(0.0, a * size.y, b * size.z),
                2 => origin + Vector3::new(size.x, a * size.y, b * size.z),
                3 => origin + Vector3::new(a * size.x, 0.0, b * size.z),
                _ => origin + Vector3::new(a * size.x, size.y, b * size.z),
            });
        }
    }
    points
}

fn scene_multi_sphere(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    let n_spheres = rng.gen_range(3..=5);
    let spheres: Vec<(Vector3<f64>, f64)> = (0..n_spheres)
        .map(|_| {
            let c = Vector3::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
            );
            (c, rng.gen_range(0.1..0.25))
        })
        .collect();
    (0..n)
        .map(|_| {
            let (c, r) = spheres[rng.gen_range(0..spheres.len())];
            c + r * unit_vector(rng)
        })
        .collect()
}

fn scene_plane_clusters(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    let n_planes = rng.gen_range(3..=4);
    let planes: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>, f64)> = (0..n_planes)
        .map(|_| {
            let origin = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let u = unit_vector(rng);
            let mut v = unit_vector(rng);
            v = (v - u * u.dot(&v)).normalize();
            (origin, u, v, rng.gen_range(0.3..0.6))
        })
        .collect();
    let n_blobs = 3;
    let blobs: Vec<Vector3<f64>> = (0..n_blobs)
        .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
        .collect();
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.7) {
                let (o, u, v, ext) = planes[rng.gen_range(0..planes.len())];
                o + u * rng.gen_range(-0.5 * ext..0.5 * ext) + v * rng.gen_range(-0.5 * ext..0.5 * ext)
            } else {
                let c = blobs[rng.gen_range(0..blobs.len())];
                c + 0.05
                    * Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    )
            }
        })
        .collect()
}

/// Deterministic scene of `n_points` points for the configured shape family.
pub fn generate_scene(config: &SynthConfig) -> Result<PointCloud, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let points = match config.shape_kind {
        ShapeKind::BoxRoom => scene_box_room(&mut rng, config.n_points),
        ShapeKind::MultiSphere => scene_multi_sphere(&mut rng, config.n_points),
        ShapeKind::PlaneClusters => scene_plane_clusters(&mut rng, config.n_points),
    };
    Ok(PointCloud::new(points)?)
}

/// Samples a pose with a uniform axis, a rotation angle uniform in
/// `[0, rotation_max]`, and a translation uniform in the ball of radius
/// `translation_max`.
fn sample_pose(rng: &mut impl Rng, config: &SynthConfig) -> RigidTransform {
    let axis = unit_vector(rng);
    let angle = if config.rotation_max > 0.0 { rng.gen_range(0.0..=config.rotation_max) } else { 0.0 };
    let dir = unit_vector(rng);
    let radius = if config.translation_max > 0.0 {
        config.translation_max * rng.gen::<f64>().cbrt()
    } else {
        0.0
    };
    RigidTransform::from_axis_angle(axis, angle, dir * radius)
        .expect("axis-angle construction is always a rotation")
}

/// Crops two half-space views out of the scene along a random axis, with the
/// per-view size chosen so the slab shared by both views meets the overlap
/// target exactly, then poses one view and adds noise to both.
///
/// View sizes are `m = ceil(n / (2 - overlap_target))`; the `2m - n` points
/// in the middle of the projection order belong to both views, so each view's
/// realized overlap fraction is at least `overlap_target` by construction.
pub fn make_pair(scene: &PointCloud, config: &SynthConfig) -> Result<RegistrationPair, SynthError> {
    config.validate()?;
    let n = scene.len();
    let m = (n as f64 / (2.0 - config.overlap_target)).ceil() as usize;
    if m < 2 || m > n {
        return Err(SynthError::InvalidConfig(format!(
            "cannot crop views of {m} points out of a scene of {n}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let axis = unit_vector(&mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scene.point(a).dot(&axis).total_cmp(&scene.point(b).dot(&axis)).then(a.cmp(&b))
    });

    // P takes the m lowest projections, Q the m highest; the middle band of
    // 2m - n points is the overlap region.
    let mut in_p = vec![false; n];
    let mut in_q = vec![false; n];
    for &i in &order[..m] {
        in_p[i] = true;
    }
    for &i in &order[n - m..] {
        in_q[i] = true;
    }

    let collect_view = |mask: &[bool]| -> (Vec<Vector3<f64>>, Vec<bool>) {
        let mut pts = Vec::with_capacity(m);
        let mut overlap = Vec::with_capacity(m);
        for i in 0..n {
            if mask[i] {
                pts.push(scene.point(i));
                overlap.push(in_p[i] && in_q[i]);
            }
        }
        (pts, overlap)
    };
    let (p_points, overlap_mask_p) = collect_view(&in_p);
    let (q_points, overlap_mask_q) = collect_view(&in_q);

    let t_gt = sample_pose(&mut rng, config);
    let q_view = PointCloud::new(q_points)?;
    let mut q = apply_transform(&q_view, &t_gt);
    let mut p = PointCloud::new(p_points)?;

    if config.noise_sigma > 0.0 {
        let mut perturb = |cloud: &PointCloud| -> Result<PointCloud, SynthError> {
            Ok(PointCloud::new(
                cloud
                    .iter()
                    .map(|pt| {
                        pt + config.noise_sigma
                            * Vector3::new(
                                rng.sample::<f64, _>(StandardNormal),
                                rng.sample::<f64, _>(StandardNormal),
                                rng.sample::<f64, _>(StandardNormal),
                            )
                    })
                    .collect(),
            )?)
        };
        p = perturb(&p)?;
        q = perturb(&q)?;
    }

    Ok(RegistrationPair {
        p,
        q,
        t_gt,
        overlap_mask_p,
        overlap_mask_q,
        seed: config.seed,
    })
}

/// Dataset splits draw from disjoint seed ranges of the base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn offset(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// The seed of pair `index` within `split`, disjoint across splits.
pub fn pair_seed(base_seed: u64, split: Split, index: u64) -> u64 {
    base_seed.wrapping_add(split.offset().wrapping_shl(40)).wrapping_add(index)
}

/// Deterministic pair sequence for one split.
pub fn dataset(
    config: &SynthConfig,
    split: Split,
    count: usize,
) -> impl Iterator<Item = Result<RegistrationPair, SynthError>> + '_ {
    let base = config.clone();
    (0..count as u64).map(move |i| {
        let mut cfg = base.clone();
        cfg.seed = pair_seed(base.seed, split, i);
        let scene = generate_scene(&cfg)?;
        make_pair(&scene, &cfg)
    })
}

/// Collects a split into memory, failing on the first generation error.
pub fn collect_dataset(
    config: &SynthConfig,
    split: Split,
    count: usize,
) -> Result<Vec<RegistrationPair>, SynthError> {
    dataset(config, split, count).collect()
}

#[cfg(test)]
mod tests;
