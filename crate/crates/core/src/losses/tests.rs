use approx::assert_abs_diff_eq;
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{adamw_step, OptimizerConfig, ParamStore};
use crate::confidence::{pair_features, ConfidenceConfig, ConfidenceModel};
use crate::matching::{MatchingModel, MatchingModelConfig};

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

fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0f64),
    );
    let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
    RigidTransform::from_axis_angle(
        axis,
        rng.gen_range(-1.0..1.0),
        Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
    )
    .unwrap()
}

/// Exhaustive mutual-nearest-neighbor oracle with explicit tie-breaks.
fn mutual_nn_oracle(p: &PointCloud, q: &PointCloud, t: &RigidTransform) -> Vec<(usize, usize)> {
    let moved = apply_transform(p, t);
    let nearest_in_q = |u: usize| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..q.len() {
            let d = (moved.point(u) - q.point(j)).norm_squared();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    };
    let nearest_in_p = |v: usize| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for u in 0..p.len() {
            let d = (moved.point(u) - q.point(v)).norm_squared();
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
        best
    };
    (0..p.len())
        .filter_map(|u| {
            let v = nearest_in_q(u);
            (nearest_in_p(v) == u).then_some((u, v))
        })
        .collect()
}

#[test]
fn exact_overlay_gives_identity_pairing() {
    let mut rng = StdRng::seed_from_u64(91);
    let p = random_cloud(&mut rng, 20);
    let t = random_transform(&mut rng);
    let q = apply_transform(&p, &t);
    let c = build_correspondences(&p, &q, &t);
    assert_eq!(c.pairs, (0..20).map(|i| (i, i)).collect::<Vec<_>>());
    assert_eq!(c.c_p, (0..20).collect::<Vec<_>>());
    assert_eq!(c.c_q, (0..20).collect::<Vec<_>>());
}

#[test]
fn closer_of_two_sources_wins() {
    // Two P points near one q; only the closer one pairs with it.
    let p = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]]).unwrap();
    let q = PointCloud::from_rows(&[[0.1, 0.0, 0.0]]).unwrap();
    let c = build_correspondences(&p, &q, &RigidTransform::identity());
    assert_eq!(c.pairs, vec![(0, 0)]);
    let oracle = mutual_nn_oracle(&p, &q, &RigidTransform::identity());
    assert_eq!(c.pairs, oracle);
}

#[test]
fn coincident_pair_in_disjoint_clouds() {
    let p = PointCloud::from_rows(&[[0.0; 3], [0.1, 0.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
    let q = PointCloud::from_rows(&[[5.0, 5.0, 5.0], [-9.0, -9.0, -9.0]]).unwrap();
    let c = build_correspondences(&p, &q, &RigidTransform::identity());
    let oracle = mutual_nn_oracle(&p, &q, &RigidTransform::identity());
    assert_eq!(c.pairs, oracle);
    assert!(c.pairs.contains(&(2, 0)));
}

#[test]
fn matches_exhaustive_oracle_with_ties() {
    let mut rng = StdRng::seed_from_u64(92);
    for _ in 0..200 {
        let n = rng.gen_range(2..64);
        let m = rng.gen_range(2..64);
        let mut p = random_cloud(&mut rng, n);
        let q = random_cloud(&mut rng, m);
        // Duplicate a source point occasionally to create exact ties.
        if rng.gen_bool(0.4) && n >= 2 {
            let mut pts = p.points().to_vec();
            pts[1] = pts[0];
            p = PointCloud::new(pts).unwrap();
        }
        let t = random_transform(&mut rng);
        let c = build_correspondences(&p, &q, &t);
        assert_eq!(c.pairs, mutual_nn_oracle(&p, &q, &t));

        // Injectivity on both sides.
        let mut us: Vec<usize> = c.pairs.iter().map(|&(u, _)| u).collect();
        let mut vs: Vec<usize> = c.pairs.iter().map(|&(_, v)| v).collect();
        us.dedup();
        vs.sort_unstable();
        vs.dedup();
        assert_eq!(us.len(), c.pairs.len());
        assert_eq!(vs.len(), c.pairs.len());
    }
}

#[test]
fn loss_ca_zero_at_perfect_attention() {
    let mut tape = Tape::new();
    let c = CorrespondenceSet { pairs: vec![(0, 1), (1, 0)], c_p: vec![0, 1], c_q: vec![0, 1] };
    let ones = tape.constant(&[2, 2], vec![1.0; 4]).unwrap();
    let loss = loss_ca(&mut tape, ones, ones, &c, 2, 2).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);
}

#[test]
fn loss_ca_uniform_closed_form() {
    // Product of L uniform row-stochastic layers has entries M^-L, so the
    // PQ term is |C| L ln(M) / N; an all-ones QP matrix contributes zero.
    let (n, m, l_count) = (5, 8, 3usize);
    let mut tape = Tape::new();
    let uniform = (1.0 / m as f64).powi(l_count as i32);
    let global_pq = tape.constant(&[n, m], vec![uniform; n * m]).unwrap();
    let global_qp = tape.constant(&[n, m], vec![1.0; n * m]).unwrap();
    let c = CorrespondenceSet { pairs: vec![(0, 0), (2, 4), (4, 7)], c_p: vec![0, 2, 4], c_q: vec![0, 4, 7] };
    let loss = loss_ca(&mut tape, global_pq, global_qp, &c, n, m).unwrap();
    let expected = 3.0 * l_count as f64 * (m as f64).ln() / n as f64;
    assert_abs_diff_eq!(tape.value(loss)[0], expected, epsilon = 1e-12);
}

#[test]
fn loss_ca_two_algebraic_forms_agree() {
    let mut rng = StdRng::seed_from_u64(93);
    for _ in 0..20 {
        let (n, m, layers) = (6, 7, 3);
        let mut tape = Tape::new();
        let mut layer_ids = Vec::new();
        for _ in 0..layers {
            let raw: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sim = tape.constant(&[n, m], raw).unwrap();
            layer_ids.push(tape.softmax_rows(sim, 0.5).unwrap());
        }
        let global = crate::matching::attention_product(&mut tape, &layer_ids).unwrap();
        let ones = tape.constant(&[n, m], vec![1.0; n * m]).unwrap();
        let pairs: Vec<(usize, usize)> =
            (0..4).map(|_| (rng.gen_range(0..n), rng.gen_range(0..m))).collect();
        let c = CorrespondenceSet {
            c_p: pairs.iter().map(|&(u, _)| u).collect(),
            c_q: pairs.iter().map(|&(_, v)| v).collect(),
            pairs,
        };
        let product_form = loss_ca(&mut tape, global, ones, &c, n, m).unwrap();

        // Independent sum-of-log-softmax evaluation.
        let mut sum_form = 0.0;
        for &(u, v) in &c.pairs {
            for &layer in &layer_ids {
                sum_form -= tape.value(layer)[u * m + v].ln();
            }
        }
        sum_form /= n as f64;
        assert_abs_diff_eq!(tape.value(product_form)[0], sum_form, epsilon = 1e-9);
    }
}

#[test]
fn loss_cc_half_scores_give_log_two() {
    let mut tape = Tape::new();
    let scores = tape.constant(&[4], vec![0.5; 4]).unwrap();
    for labels in [[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 1.0], [1.0; 4]] {
        let loss = loss_cc_direction(&mut tape, scores, &labels).unwrap();
        assert_abs_diff_eq!(tape.value(loss)[0], 2f64.ln(), epsilon = 1e-12);
    }
}

#[test]
fn loss_cc_confident_correct_scores_vanish() {
    let mut tape = Tape::new();
    let scores = tape.constant(&[3], vec![0.999999; 3]).unwrap();
    let loss = loss_cc_direction(&mut tape, scores, &[1.0, 1.0, 1.0]).unwrap();
    assert!(tape.value(loss)[0] < 1e-5);
    assert!(tape.value(loss)[0] >= 0.0);
}

#[test]
fn accuracy_labels_invariant_under_joint_rigid_motion() {
    let mut rng = StdRng::seed_from_u64(94);
    let p = random_cloud(&mut rng, 12);
    let q = random_cloud(&mut rng, 10);
    let t_gt = random_transform(&mut rng);
    // A plausible mapped set: barycenters of random attention over Q.
    let mut tape = Tape::new();
    let raw = tape
        .constant(&[12, 10], (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let attn = tape.softmax_rows(raw, 0.5).unwrap();
    let mapped = crate::matching::soft_map(&mut tape, attn, &q).unwrap();
    let ideal: Vec<Vector3<f64>> = apply_transform(&p, &t_gt).iter().copied().collect();
    let labels = accuracy_labels(&ideal, tape.value(mapped), 0.4);

    // Move everything by G; mapped points move with Q.
    let g = random_transform(&mut rng);
    let p2 = apply_transform(&p, &g);
    let q2 = apply_transform(&q, &g);
    let t2 = g.compose(&t_gt).compose(&g.invert());
    let mapped2 = crate::matching::soft_map(&mut tape, attn, &q2).unwrap();
    let ideal2: Vec<Vector3<f64>> = apply_transform(&p2, &t2).iter().copied().collect();
    let labels2 = accuracy_labels(&ideal2, tape.value(mapped2), 0.4);
    assert_eq!(labels, labels2);
}

#[test]
fn loss_gc_trivia_and_oracle() {
    let mut rng = StdRng::seed_from_u64(95);
    let mut tape = Tape::new();
    let ideal: Vec<Vector3<f64>> = (0..6).map(|_| {
        Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }).collect();
    let flat: Vec<f64> = ideal.iter().flat_map(|v| [v.x, v.y, v.z]).collect();

    // Exact mapped points give zero.
    let mapped = tape.constant(&[6, 3], flat.clone()).unwrap();
    let w = tape.constant(&[6], vec![0.7; 6]).unwrap();
    let loss = loss_gc_direction(&mut tape, w, mapped, &ideal).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);

    // All-zero confidences give zero regardless of distances.
    let off: Vec<f64> = flat.iter().map(|v| v + 0.3).collect();
    let mapped = tape.constant(&[6, 3], off.clone()).unwrap();
    let w0 = tape.constant(&[6], vec![0.0; 6]).unwrap();
    let loss = loss_gc_direction(&mut tape, w0, mapped, &ideal).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);

    // Random case matches the direct weighted sum.
    let wv: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mv: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(&[6], wv.clone()).unwrap();
    let mapped = tape.constant(&[6, 3], mv.clone()).unwrap();
    let loss = loss_gc_direction(&mut tape, w, mapped, &ideal).unwrap();
    let expected: f64 = (0..6)
        .map(|i| {
            let d = (Vector3::new(mv[i * 3], mv[i * 3 + 1], mv[i * 3 + 2]) - ideal[i]).norm();
            wv[i] * d / 6.0
        })
        .sum();
    assert_abs_diff_eq!(tape.value(loss)[0], expected, epsilon = 1e-12);
}

#[test]
fn loss_ga_trivia_and_oracle() {
    let mut tape = Tape::new();
    let targets = vec![Vector3::new(1.0, 0.0, 0.0)];
    let mapped = tape.constant(&[3, 3], vec![9.0, 9.0, 9.0, 1.0, 0.0, 0.0, 8.0, 8.0, 8.0]).unwrap();
    let loss = loss_ga_direction(&mut tape, mapped, &[1], &targets).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);

    // A single pair offset by distance 2.
    let mapped = tape.constant(&[2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
    let loss = loss_ga_direction(&mut tape, mapped, &[1], &targets).unwrap();
    assert_eq!(tape.value(loss)[0], 2.0);

    // Empty matched set contributes zero.
    let loss = loss_ga_direction(&mut tape, mapped, &[], &[]).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);

    let mut rng = StdRng::seed_from_u64(96);
    let mv: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mapped = tape.constant(&[5, 3], mv.clone()).unwrap();
    let idx = vec![0, 2, 4];
    let targets: Vec<Vector3<f64>> = (0..3).map(|_| {
        Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }).collect();
    let loss = loss_ga_direction(&mut tape, mapped, &idx, &targets).unwrap();
    let expected: f64 = idx
        .iter()
        .zip(&targets)
        .map(|(&i, t)| (Vector3::new(mv[i * 3], mv[i * 3 + 1], mv[i * 3 + 2]) - t).norm() / 3.0)
        .sum();
    assert_abs_diff_eq!(tape.value(loss)[0], expected, epsilon = 1e-12);
}

#[test]
fn flag_validation_rules() {
    let gc_only = LossFlags { ca: true, cc: false, gc: true, ga: false };
    assert!(matches!(gc_only.validate(MapMode::Soft), Err(LossError::GcWithoutCc)));

    let with_ga = LossFlags { ca: true, cc: true, gc: true, ga: true };
    assert!(matches!(with_ga.validate(MapMode::Sparse), Err(LossError::GaRequiresSoftMap)));
    assert!(with_ga.validate(MapMode::Soft).is_ok());
    assert!(LossFlags::default().validate(MapMode::Sparse).is_ok());
}

/// Builds a tiny full pipeline (matching + confidence) on one tape.
fn tiny_pipeline(
    map_mode: MapMode,
    seed: u64,
) -> (ParamStore, MatchingModel, ConfidenceModel, PointCloud, PointCloud, RigidTransform) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = MatchingModelConfig::with_layers(2);
    config.k = 4;
    config.map_mode = map_mode;
    let matching = MatchingModel::init(config, &mut store, &mut rng).unwrap();
    let confidence =
        ConfidenceModel::init(ConfidenceConfig { width: 8, k: 4 }, &mut store, &mut rng);

    let mut data_rng = StdRng::seed_from_u64(seed + 1000);
    let p = random_cloud(&mut data_rng, 10);
    let t_gt = random_transform(&mut data_rng);
    let q = apply_transform(&p, &t_gt);
    (store, matching, confidence, p, q, t_gt)
}

fn run_total_loss(
    store: &ParamStore,
    matching: &MatchingModel,
    confidence: &ConfidenceModel,
    p: &PointCloud,
    q: &PointCloud,
    t_gt: &RigidTransform,
    flags: &LossFlags,
) -> (Tape, TensorId, LossBreakdown) {
    let mut tape = Tape::new();
    let fwd = matching.forward(&mut tape, store, p, q).unwrap();
    let pairs_p = pair_features(&mut tape, p, fwd.mapped_pq).unwrap();
    let scores_p = confidence.forward(&mut tape, store, p, pairs_p).unwrap();
    let pairs_q = pair_features(&mut tape, q, fwd.mapped_qp).unwrap();
    let scores_q = confidence.forward(&mut tape, store, q, pairs_q).unwrap();
    let c = build_correspondences(p, q, t_gt);
    let (loss, breakdown) = total_loss(
        &mut tape,
        flags,
        &LossInputs {
            global_pq: fwd.global_pq,
            global_qp: fwd.global_qp,
            mapped_pq: fwd.mapped_pq,
            mapped_qp: fwd.mapped_qp,
            scores_p,
            scores_q,
            map_mode: matching.config.map_mode,
            p,
            q,
            t_gt,
            correspondences: &c,
            kappa: 0.2,
        },
    )
    .unwrap();
    (tape, loss, breakdown)
}

#[test]
fn total_is_sum_of_enabled_terms() {
    let (store, matching, confidence, p, q, t_gt) = tiny_pipeline(MapMode::Soft, 21);
    let flags = LossFlags::default();
    let (_, _, b) = run_total_loss(&store, &matching, &confidence, &p, &q, &t_gt, &flags);
    assert_abs_diff_eq!(b.total, b.l_ca + b.l_cc + b.l_gc, epsilon = 1e-12);
    assert_eq!(b.l_ga, 0.0);
    assert!(b.l_ca.is_finite() && b.l_ca >= 0.0);
    assert!(b.l_cc >= 0.0 && b.l_gc >= 0.0);

    let all = LossFlags { ca: true, cc: true, gc: true, ga: true };
    let (_, _, b) = run_total_loss(&store, &matching, &confidence, &p, &q, &t_gt, &all);
    assert_abs_diff_eq!(b.total, b.l_ca + b.l_cc + b.l_gc + b.l_ga, epsilon = 1e-12);
}

#[test]
fn attention_loss_descends_after_one_step() {
    let (mut store, matching, confidence, p, q, t_gt) = tiny_pipeline(MapMode::Soft, 22);
    let flags = LossFlags { ca: true, cc: false, gc: false, ga: false };
    let (mut tape, loss, before) =
        run_total_loss(&store, &matching, &confidence, &p, &q, &t_gt, &flags);
    tape.backward(loss).unwrap();
    let config = OptimizerConfig { learning_rate: 1e-3, weight_decay: 0.0, ..Default::default() };
    adamw_step(&mut store, &tape, &config);
    let (_, _, after) = run_total_loss(&store, &matching, &confidence, &p, &q, &t_gt, &flags);
    assert!(
        after.l_ca < before.l_ca,
        "attention loss should descend: {} -> {}",
        before.l_ca,
        after.l_ca
    );
}

#[test]
fn sparse_maps_isolate_matching_gradients() {
    let (store, matching, confidence, p, q, t_gt) = tiny_pipeline(MapMode::Sparse, 23);
    let flags = LossFlags { ca: false, cc: true, gc: true, ga: false };
    let (mut tape, loss, _) = run_total_loss(&store, &matching, &confidence, &p, &q, &t_gt, &flags);
    tape.backward(loss).unwrap();
    let mut checked = 0;
    for (id, leaf) in tape.touched_params() {
        if store.entry(id).name.starts_with("match.") {
            assert!(
                tape.grad(leaf).iter().all(|&g| g == 0.0),
                "confidence losses leaked into {}",
                store.entry(id).name
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn attention_loss_reaches_every_matching_parameter() {
    let (store, matching, confidence, p, q, t_gt) = tiny_pipeline(MapMode::Soft, 24);
    let flags = LossFlags { ca: true, cc: false, gc: false, ga: false };
    let (mut tape, loss, _) = run_total_loss(&store, &matching, &confidence, &p, &q, &t_gt, &flags);
    tape.backward(loss).unwrap();
    for (id, leaf) in tape.touched_params() {
        let name = &store.entry(id).name;
        if name.starts_with("match.") {
            let norm: f64 = tape.grad(leaf).iter().map(|g| g * g).sum();
            assert!(norm > 0.0, "no gradient reached {name}");
        }
    }
}
