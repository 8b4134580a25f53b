//! Ground-truth correspondence construction and the training losses: the
//! attention cross-entropy, the confidence classification and geometric
//! losses, and the soft-map geometric loss used in ablations.

use nalgebra::Vector3;
use thiserror::Error;

use crate::autodiff::{Tape, TensorError, TensorId};
use crate::geometry::{apply_transform, knn, GeometryError, PointCloud, RigidTransform};
use crate::matching::MapMode;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("geometric confidence loss requires the classification loss")]
    GcWithoutCc,
    #[error("the attention geometric loss requires soft maps")]
    GaRequiresSoftMap,
    #[error("kappa must be positive, got {0}")]
    InvalidKappa(f64),
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Mutual-nearest-neighbor ground-truth pairs under `T_gt`, with the index
/// sets of matched source and target points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceSet {
    /// `(u, v)` pairs, ascending in `u`. Each `u` and each `v` appears at
    /// most once; mutual nearest neighbors are injective by construction.
    pub pairs: Vec<(usize, usize)>,
    /// Sorted matched indices into P.
    pub c_p: Vec<usize>,
    /// Sorted matched indices into Q.
    pub c_q: Vec<usize>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs `(u, v)` where `q_v` is the nearest target to `T_gt(p_u)` and
/// `T_gt(p_u)` is the nearest transformed source to `q_v`, ties broken by
/// lowest index. An empty set is legal: low-overlap pairs are left as they
/// are rather than padded with worse matches.
pub fn build_correspondences(
    p: &PointCloud,
    q: &PointCloud,
    t_gt: &RigidTransform,
) -> CorrespondenceSet {
    let moved = apply_transform(p, t_gt);
    let to_q = knn(q, &moved, 1).expect("k=1 on a nonempty cloud");
    let to_p = knn(&moved, q, 1).expect("k=1 on a nonempty cloud");
    let mut pairs = Vec::new();
    let mut c_q = Vec::new();
    for u in 0..p.len() {
        let v = to_q.row(u)[0];
        if to_p.row(v)[0] == u {
            pairs.push((u, v));
            c_q.push(v);
        }
    }
    let c_p = pairs.iter().map(|&(u, _)| u).collect();
    c_q.sort_unstable();
    CorrespondenceSet { pairs, c_p, c_q }
}

/// Cross-entropy on the global attention matrices:
/// `-(1/N) sum_C log (A*_PQ)_uv - (1/M) sum_C log (A*_QP)_uv`.
/// Contributes zero when `C` is empty.
pub fn loss_ca(
    tape: &mut Tape,
    global_pq: TensorId,
    global_qp: TensorId,
    c: &CorrespondenceSet,
    n: usize,
    m: usize,
) -> Result<TensorId, LossError> {
    if c.is_empty() {
        return Ok(tape.scalar(0.0)?);
    }
    let mut term = |tape: &mut Tape, global: TensorId, norm: usize| -> Result<TensorId, LossError> {
        let entries = tape.gather_entries(global, &c.pairs)?;
        let logs = tape.log(entries)?;
        let s = tape.sum_all(logs)?;
        Ok(tape.scale(s, -1.0 / norm as f64)?)
    };
    let pq = term(tape, global_pq, n)?;
    let qp = term(tape, global_qp, m)?;
    Ok(tape.add(pq, qp)?)
}

/// Accuracy labels for the classification loss: 1 when the mapped point
/// lands within `kappa` of its ideal position.
pub fn accuracy_labels(ideal: &[Vector3<f64>], mapped: &[f64], kappa: f64) -> Vec<f64> {
    ideal
        .iter()
        .zip(mapped.chunks_exact(3))
        .map(|(t, m)| {
            let d = (t - Vector3::new(m[0], m[1], m[2])).norm();
            if d <= kappa {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// One direction of the binary cross-entropy on confidence scores:
/// `-(1/N) sum_i y_i log w_i + (1 - y_i) log(1 - w_i)`.
pub fn loss_cc_direction(
    tape: &mut Tape,
    scores: TensorId,
    labels: &[f64],
) -> Result<TensorId, LossError> {
    let n = labels.len();
    if tape.value(scores).len() != n {
        return Err(LossError::LengthMismatch(tape.value(scores).len(), n));
    }
    let y = tape.constant(&[n], labels.to_vec())?;
    let y_neg = tape.constant(&[n], labels.iter().map(|l| 1.0 - l).collect())?;
    let log_w = tape.log(scores)?;
    let w_neg = tape.scale(scores, -1.0)?;
    let one_minus = tape.add_scalar(w_neg, 1.0)?;
    let log_1w = tape.log(one_minus)?;
    let pos = tape.mul(y, log_w)?;
    let neg = tape.mul(y_neg, log_1w)?;
    let both = tape.add(pos, neg)?;
    let s = tape.sum_all(both)?;
    Ok(tape.scale(s, -1.0 / n as f64)?)
}

/// One direction of the geometric confidence loss:
/// `(1/N) sum_i w_i ||ideal_i - mapped_i||`. The distance is computed on
/// tape, so with soft maps its gradient reaches the matching network.
pub fn loss_gc_direction(
    tape: &mut Tape,
    scores: TensorId,
    mapped: TensorId,
    ideal: &[Vector3<f64>],
) -> Result<TensorId, LossError> {
    let n = ideal.len();
    if tape.shape(mapped) != [n, 3] {
        return Err(LossError::LengthMismatch(tape.shape(mapped)[0], n));
    }
    let flat: Vec<f64> = ideal.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let target = tape.constant(&[n, 3], flat)?;
    let diff = tape.sub(mapped, target)?;
    let dist = tape.row_norms(diff)?;
    let weighted = tape.mul(scores, dist)?;
    let s = tape.sum_all(weighted)?;
    Ok(tape.scale(s, 1.0 / n as f64)?)
}

/// One direction of the attention geometric loss: mean distance between the
/// soft-mapped points and their ideal corresponding points over the matched
/// subset. Zero when the subset is empty.
pub fn loss_ga_direction(
    tape: &mut Tape,
    mapped: TensorId,
    matched_indices: &[usize],
    targets: &[Vector3<f64>],
) -> Result<TensorId, LossError> {
    if matched_indices.len() != targets.len() {
        return Err(LossError::LengthMismatch(matched_indices.len(), targets.len()));
    }
    if matched_indices.is_empty() {
        return Ok(tape.scalar(0.0)?);
    }
    let c = matched_indices.len();
    let gathered = tape.gather_rows(mapped, matched_indices, c, 1)?;
    let picked = tape.reshape(gathered, &[c, 3])?;
    let flat: Vec<f64> = targets.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let target = tape.constant(&[c, 3], flat)?;
    let diff = tape.sub(picked, target)?;
    let dist = tape.row_norms(diff)?;
    let s = tape.sum_all(dist)?;
    Ok(tape.scale(s, 1.0 / c as f64)?)
}

/// Which loss terms are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub ca: bool,
    pub cc: bool,
    pub gc: bool,
    pub ga: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { ca: true, cc: true, gc: true, ga: false }
    }
}

impl LossFlags {
    pub fn validate(&self, map_mode: MapMode) -> Result<(), LossError> {
        if self.gc && !self.cc {
            return Err(LossError::GcWithoutCc);
        }
        if self.ga && map_mode == MapMode::Sparse {
            return Err(LossError::GaRequiresSoftMap);
        }
        Ok(())
    }
}

/// Scalar values of the individual terms and their sum. Disabled terms are
/// reported as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ca: f64,
    pub l_cc: f64,
    pub l_gc: f64,
    pub l_ga: f64,
    pub total: f64,
}

/// Everything the loss needs from one forward pass.
pub struct LossInputs<'a> {
    pub global_pq: TensorId,
    pub global_qp: TensorId,
    pub mapped_pq: TensorId,
    pub mapped_qp: TensorId,
    pub scores_p: TensorId,
    pub scores_q: TensorId,
    pub map_mode: MapMode,
    pub p: &'a PointCloud,
    pub q: &'a PointCloud,
    pub t_gt: &'a RigidTransform,
    pub correspondences: &'a CorrespondenceSet,
    pub kappa: f64,
}

/// Assembles the enabled loss terms into one scalar plus its breakdown.
pub fn total_loss(
    tape: &mut Tape,
    flags: &LossFlags,
    inputs: &LossInputs,
) -> Result<(TensorId, LossBreakdown), LossError> {
    flags.validate(inputs.map_mode)?;
    if (flags.cc || flags.gc) && !(inputs.kappa > 0.0) {
        return Err(LossError::InvalidKappa(inputs.kappa));
    }
    let n = inputs.p.len();
    let m = inputs.q.len();
    let ideal_pq: Vec<Vector3<f64>> =
        apply_transform(inputs.p, inputs.t_gt).iter().copied().collect();
    let ideal_qp: Vec<Vector3<f64>> =
        apply_transform(inputs.q, &inputs.t_gt.invert()).iter().copied().collect();

    let mut terms: Vec<TensorId> = Vec::new();
    let mut breakdown = LossBreakdown { l_ca: 0.0, l_cc: 0.0, l_gc: 0.0, l_ga: 0.0, total: 0.0 };

    if flags.ca {
        let t = loss_ca(tape, inputs.global_pq, inputs.global_qp, inputs.correspondences, n, m)?;
        breakdown.l_ca = tape.value(t)[0];
        terms.push(t);
    }
    if flags.cc {
        let labels_p = accuracy_labels(&ideal_pq, tape.value(inputs.mapped_pq), inputs.kappa);
        let labels_q = accuracy_labels(&ideal_qp, tape.value(inputs.mapped_qp), inputs.kappa);
        let pq = loss_cc_direction(tape, inputs.scores_p, &labels_p)?;
        let qp = loss_cc_direction(tape, inputs.scores_q, &labels_q)?;
        let t = tape.add(pq, qp)?;
        breakdown.l_cc = tape.value(t)[0];
        terms.push(t);
    }
    if flags.gc {
        let pq = loss_gc_direction(tape, inputs.scores_p, inputs.mapped_pq, &ideal_pq)?;
        let qp = loss_gc_direction(tape, inputs.scores_q, inputs.mapped_qp, &ideal_qp)?;
        let t = tape.add(pq, qp)?;
        breakdown.l_gc = tape.value(t)[0];
        terms.push(t);
    }
    if flags.ga {
        let c = inputs.correspondences;
        let targets_pq: Vec<Vector3<f64>> =
            c.pairs.iter().map(|&(_, v)| inputs.q.point(v)).collect();
        let idx_pq: Vec<usize> = c.pairs.iter().map(|&(u, _)| u).collect();
        let pq = loss_ga_direction(tape, inputs.mapped_pq, &idx_pq, &targets_pq)?;

        let mut by_v: Vec<(usize, usize)> = c.pairs.iter().map(|&(u, v)| (v, u)).collect();
        by_v.sort_unstable();
        let targets_qp: Vec<Vector3<f64>> =
            by_v.iter().map(|&(_, u)| inputs.p.point(u)).collect();
        let idx_qp: Vec<usize> = by_v.iter().map(|&(v, _)| v).collect();
        let qp = loss_ga_direction(tape, inputs.mapped_qp, &idx_qp, &targets_qp)?;
        let t = tape.add(pq, qp)?;
        breakdown.l_ga = tape.value(t)[0];
        terms.push(t);
    }

    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.scalar(0.0)?,
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    breakdown.total = tape.value(total)[0];
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests;
