use super::{
    knn, rotation_error, weighted_procrustes, GeometryError, PointCloud, RigidTransform,
};

/// Iteration controls for [`icp_refine`].
#[derive(Debug, Clone, Copy)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Stop once the combined rotation-angle plus translation change between
    /// consecutive transforms drops below this.
    pub convergence_eps: f64,
    /// Nearest-neighbor pairs farther apart than this are rejected.
    pub max_pair_dist: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iters: 30, convergence_eps: 1e-8, max_pair_dist: 0.25 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// False when no inlier pairs existed at the initial transform and the
    /// input was returned untouched.
    pub progressed: bool,
    pub iterations: usize,
    /// Root-mean-square residual over inlier pairs at the returned transform.
    pub inlier_rms: f64,
}

/// Matches every transformed source point to its nearest target point,
/// keeping pairs within `max_pair_dist`. Returns (source index, target
/// index) pairs and the residual RMS.
fn match_inliers(
    source: &PointCloud,
    target: &PointCloud,
    transform: &RigidTransform,
    max_pair_dist: f64,
) -> (Vec<(usize, usize)>, f64) {
    let moved = super::apply_transform(source, transform);
    let nearest = knn(target, &moved, 1).expect("k=1 is always valid for a nonempty cloud");
    let mut pairs = Vec::new();
    let mut sq_sum = 0.0;
    for (i, p) in moved.iter().enumerate() {
        let j = nearest.row(i)[0];
        let d2 = (p - target.point(j)).norm_squared();
        if d2.sqrt() <= max_pair_dist {
            pairs.push((i, j));
            sq_sum += d2;
        }
    }
    let rms = if pairs.is_empty() { f64::INFINITY } else { (sq_sum / pairs.len() as f64).sqrt() };
    (pairs, rms)
}

/// Classic point-to-point ICP seeded at `t_init`: alternates nearest-neighbor
/// matching with distance-gated pairs and an unweighted Procrustes fit.
///
/// Candidate transforms that would raise the inlier RMS are rejected, so the
/// returned transform never scores worse than `t_init`; with no inliers at
/// `t_init` the input is returned with `progressed = false`.
pub fn icp_refine(
    source: &PointCloud,
    target: &PointCloud,
    t_init: &RigidTransform,
    params: &IcpParams,
) -> IcpResult {
    let (pairs, mut best_rms) = match_inliers(source, target, t_init, params.max_pair_dist);
    if pairs.is_empty() {
        return IcpResult { transform: *t_init, progressed: false, iterations: 0, inlier_rms: best_rms };
    }

    let mut current = *t_init;
    let mut iterations = 0;
    let mut pairs = pairs;
    for _ in 0..params.max_iters {
        let src_pts: Vec<_> = pairs.iter().map(|&(i, _)| source.point(i)).collect();
        let dst_pts: Vec<_> = pairs.iter().map(|&(_, j)| target.point(j)).collect();
        let fit = match weighted_procrustes(
            &PointCloud::new(src_pts).expect("inlier set is nonempty"),
            &PointCloud::new(dst_pts).expect("inlier set is nonempty"),
            &vec![1.0; pairs.len()],
        ) {
            Ok(t) => t,
            Err(_) => break,
        };
        let (next_pairs, next_rms) = match_inliers(source, target, &fit, params.max_pair_dist);
        if next_pairs.is_empty() || next_rms > best_rms {
            break;
        }
        let change = rotation_error(fit.rotation(), current.rotation())
            + (fit.translation() - current.translation()).norm();
        current = fit;
        best_rms = next_rms;
        pairs = next_pairs;
        iterations += 1;
        if change < params.convergence_eps {
            break;
        }
    }
    IcpResult { transform: current, progressed: true, iterations, inlier_rms: best_rms }
}
