use ndarray::Array2;
use obbkit::cascade::{finalize, fuse_scores, run_cascade, PipelineConfig, StageOutput};
use obbkit::geometry::Obb;
use obbkit::nms::{nms_boxes, NmsParams};
use obbkit::relation::{classify, icmm_forward, IcmmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stage1(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let p: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    Array2::from_shape_fn((n, 2), |(i, j)| if j == 1 { p[i] } else { 1.0 - p[i] })
}

#[test]
fn cascade_equals_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = PipelineConfig::default();
    for _ in 0..20 {
        let n = 10;
        let rois: Vec<Obb> = (0..n)
            .map(|_| Obb::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0), rng.gen_range(10.0..60.0), rng.gen_range(10.0..60.0), rng.gen_range(-1.5..1.5)).unwrap())
            .collect();
        let feats = Array2::from_shape_simple_fn((n, 8), || rng.gen_range(-1.0..1.0));
        let c1 = stage1(&mut rng, n);
        let params = IcmmParams::random(8, 2, rng.gen());

        let got = run_cascade(&rois, &feats, &c1, &params, &cfg, "img").unwrap();

        let key_scores = c1.column(1).to_vec();
        let enhanced = icmm_forward(&rois, &key_scores, &feats, &params, &cfg.icmm()).unwrap();
        let c2 = classify(&enhanced, &params.head).unwrap();
        let avg = (&c1 + &c2) / 2.0;
        let building = avg.column(1).to_vec();
        let kept = nms_boxes(&rois, &building, &NmsParams { iou_threshold: 0.1, max_keep: Some(300), score_floor: 0.05 });
        assert_eq!(got.len(), kept.len());
        for (d, &k) in got.iter().zip(&kept) {
            assert_eq!(d.obb, rois[k]);
            assert_eq!(d.score, building[k]);
            assert_eq!(d.image_id, "img");
        }
        assert_eq!(run_cascade(&rois, &feats, &c1, &params, &cfg, "img").unwrap(), got);
    }
}

#[test]
fn floor_applies_before_suppression() {
    // A sub-floor box must not suppress a weaker-overlapping survivor.
    let boxes = vec![Obb::new(0.0, 0.0, 10.0, 10.0, 0.0).unwrap(), Obb::new(2.0, 0.0, 10.0, 10.0, 0.0).unwrap()];
    let scores = Array2::from_shape_vec((2, 2), vec![0.97, 0.03, 0.2, 0.8]).unwrap();
    let stage = StageOutput::new(boxes, scores.clone()).unwrap();
    let fused = fuse_scores(&scores, &scores).unwrap();
    let out = finalize(&stage, &fused, &PipelineConfig::default(), "a").unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].score, 0.8);
}

#[test]
fn cap_limits_output() {
    let n = 400;
    let boxes: Vec<Obb> = (0..n).map(|i| Obb::new((i % 20) as f64 * 30.0, (i / 20) as f64 * 30.0, 10.0, 10.0, 0.0).unwrap()).collect();
    let scores = Array2::from_shape_fn((n, 2), |(i, j)| {
        let s = 0.1 + 0.8 * i as f64 / n as f64;
        if j == 1 { s } else { 1.0 - s }
    });
    let stage = StageOutput::new(boxes, scores.clone()).unwrap();
    let out = finalize(&stage, &scores, &PipelineConfig::default(), "a").unwrap();
    assert_eq!(out.len(), 300);
    assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
}
