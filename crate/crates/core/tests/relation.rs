use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use obbkit::geometry::{rotated_iou, Obb};
use obbkit::relation::{
    aggregate, classify, icmm_forward, icmm_trace, normalize, quantize, spatial_affinity, IcmmConfig, IcmmParams,
    RelationGraph,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar-loop reimplementation of the whole relation module.
fn naive_icmm(rois: &[Obb], scores: &[f64], f: &Array2<f64>, p: &IcmmParams, cfg: &IcmmConfig) -> Array2<f64> {
    // Keys: repeatedly take the best remaining RoI, drop its overlaps.
    let mut alive: Vec<usize> = (0..rois.len()).collect();
    let mut keys = Vec::new();
    while !alive.is_empty() {
        let best = *alive
            .iter()
            .max_by(|&&a, &&b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .unwrap();
        keys.push(best);
        alive.retain(|&j| j != best && rotated_iou(&rois[best], &rois[j]) < cfg.key_nms_iou);
    }
    let n = rois.len();
    let c = f.ncols();
    let mut a_hat = vec![vec![0.0; keys.len()]; n];
    for i in 0..n {
        let q = &rois[i];
        let mut row: Vec<f64> = keys
            .iter()
            .map(|&k| {
                let dx = (q.cx - rois[k].cx) / q.w.max(cfg.min_extent);
                let dy = (q.cy - rois[k].cy) / q.h.max(cfg.min_extent);
                let s = (-(dx * dx + dy * dy).sqrt() / 2.0).exp();
                if s >= cfg.threshold { 1.0 } else { 0.0 }
            })
            .collect();
        let deg: f64 = row.iter().sum();
        if deg > 0.0 {
            row.iter_mut().for_each(|v| *v /= deg);
        }
        a_hat[i] = row;
    }
    let mut cur = f.clone();
    for layer in &p.layers[..cfg.stacks] {
        let mut next = Array2::zeros((n, c));
        for i in 0..n {
            for o in 0..c {
                let mut v = 0.0;
                for j in 0..c {
                    v += cur[[i, j]] * layer.w_q[[j, o]];
                }
                for (m, &k) in keys.iter().enumerate() {
                    let mut fk = 0.0;
                    for j in 0..c {
                        fk += cur[[k, j]] * layer.w_k[[j, o]];
                    }
                    v += a_hat[i][m] * fk;
                }
                next[[i, o]] = v.max(0.0);
            }
        }
        cur = next;
    }
    cur
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<Obb>, Vec<f64>, Array2<f64>) {
    let rois = (0..n)
        .map(|_| {
            Obb::new(
                rng.gen_range(0..400) as f64,
                rng.gen_range(0..400) as f64,
                rng.gen_range(8..140) as f64,
                rng.gen_range(8..140) as f64,
                rng.gen_range(-PI..PI),
            )
            .unwrap()
        })
        .collect();
    let scores = (0..n).map(|_| rng.gen()).collect();
    let feats = Array2::from_shape_simple_fn((n, c), || rng.gen_range(-1.0..1.0));
    (rois, scores, feats)
}

#[test]
fn matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = IcmmConfig::default();
    for _ in 0..200 {
        let (n, c) = (rng.gen_range(1..25), rng.gen_range(1..10));
        let (rois, scores, feats) = random_instance(&mut rng, n, c);
        let p = IcmmParams::random(c, 2, rng.gen());
        let got = icmm_forward(&rois, &scores, &feats, &p, &cfg).unwrap();
        let want = naive_icmm(&rois, &scores, &feats, &p, &cfg);
        let d = (&got - &want).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(d < 1e-12, "max diff {d}");
    }
}

#[test]
fn trace_outputs_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (rois, scores, feats) = random_instance(&mut rng, 12, 4);
    let p = IcmmParams::random(4, 3, 9);
    let cfg = IcmmConfig { stacks: 3, ..IcmmConfig::default() };
    let t = icmm_trace(&rois, &scores, &feats, &p, &cfg).unwrap();
    assert_eq!(t.outputs.len(), 3);
    let one = IcmmConfig { stacks: 1, ..cfg };
    assert_eq!(icmm_forward(&rois, &scores, &feats, &p, &one).unwrap(), t.outputs[0]);
    assert!(t.outputs.iter().all(|o| o.iter().all(|&v| v >= 0.0)));
    assert_eq!(t.graph.normalized.ncols(), t.key_indices.len());
}

#[test]
fn far_apart_rois_do_not_interact() {
    // ‖Δ‖ > 2 ln 10 puts the affinity under 0.1.
    let rois = vec![Obb::new(0.0, 0.0, 20.0, 20.0, 0.0).unwrap(), Obb::new(300.0, 0.0, 20.0, 20.0, 0.0).unwrap()];
    let g = RelationGraph::build(&rois, &rois, 56.0, 0.1);
    assert!(g.affinity[[0, 1]] < 0.1);
    assert_eq!(g.adjacency, Array2::<u8>::eye(2));
    let feats = Array2::from_shape_vec((2, 2), vec![1.0, -1.0, 2.0, 3.0]).unwrap();
    let out = icmm_forward(&rois, &[0.9, 0.8], &feats, &IcmmParams::identity(2, 1), &IcmmConfig { stacks: 1, ..Default::default() }).unwrap();
    assert_eq!(out, Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 4.0, 6.0]).unwrap());
}

#[test]
fn classifier_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = IcmmParams::random(6, 2, 4);
    let feats = Array2::from_shape_simple_fn((30, 6), || rng.gen_range(-3.0..3.0));
    let probs = classify(&feats, &p.head).unwrap();
    for row in probs.outer_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

fn int_boxes(n: usize) -> impl Strategy<Value = Vec<Obb>> {
    prop::collection::vec((0i32..300, 0i32..300, 4i32..120, 4i32..120, -3.0..3.0f64), n)
        .prop_map(|v| v.into_iter().map(|(x, y, w, h, t)| Obb::new(x as f64, y as f64, w as f64, h as f64, t).unwrap()).collect())
}

proptest! {
    #[test]
    fn translation_leaves_affinity_unchanged(q in int_boxes(6), k in int_boxes(4), tx in -500i32..500, ty in -500i32..500) {
        let s = spatial_affinity(&q, &k, 56.0);
        let shift = |b: &Vec<Obb>| b.iter().map(|o| o.translated(tx as f64, ty as f64)).collect::<Vec<_>>();
        prop_assert_eq!(s, spatial_affinity(&shift(&q), &shift(&k), 56.0));
    }

    #[test]
    fn scaling_large_boxes_leaves_affinity_unchanged(q in int_boxes(5), k in int_boxes(5)) {
        // Extents at or above the clamp scale with the centres.
        let grow = |b: &Vec<Obb>| b.iter().map(|o| Obb { cx: o.cx * 2.0, cy: o.cy * 2.0, w: o.w.max(56.0) * 2.0, h: o.h.max(56.0) * 2.0, theta: o.theta }).collect::<Vec<_>>();
        let base = |b: &Vec<Obb>| b.iter().map(|o| Obb { w: o.w.max(56.0), h: o.h.max(56.0), ..*o }).collect::<Vec<_>>();
        let a = spatial_affinity(&base(&q), &base(&k), 56.0);
        let b = spatial_affinity(&grow(&q), &grow(&k), 56.0);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn normalized_rows_are_stochastic_or_empty(q in int_boxes(8), k in int_boxes(6), t in 0.01..0.9f64) {
        let a_hat = normalize(&quantize(&spatial_affinity(&q, &k, 56.0), t));
        for row in a_hat.outer_iter() {
            let s = row.sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn key_order_is_irrelevant(q in int_boxes(5), k in int_boxes(5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let f_q = Array2::from_shape_simple_fn((5, c), || rng.gen_range(-1.0..1.0));
        let f_k = Array2::from_shape_simple_fn((5, c), || rng.gen_range(-1.0..1.0));
        let a_hat = normalize(&quantize(&spatial_affinity(&q, &k, 56.0), 0.1));
        let base = aggregate(&a_hat, &f_k, &f_q).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let pk: Vec<Obb> = perm.iter().map(|&i| k[i]).collect();
        let pa = normalize(&quantize(&spatial_affinity(&q, &pk, 56.0), 0.1));
        let out = aggregate(&pa, &f_k.select(Axis(0), &perm), &f_q).unwrap();
        prop_assert!(base.iter().zip(&out).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
