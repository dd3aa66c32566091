use ndarray::{Array1, Array2, Array3, Array4};
use obbkit::geometry::Obb;
use obbkit::sgcm::{
    fuse_pyramid, level_size, mask_logits, rasterize_pseudo_mask, reduce, seg_loss, FeatureMap, FeaturePyramid,
    SgcmParams, FUSED_STRIDE, PYRAMID_STRIDES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pyramid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeaturePyramid {
    let levels = PYRAMID_STRIDES
        .iter()
        .map(|&s| {
            let data = Array3::from_shape_simple_fn((c, level_size(h, s), level_size(w, s)), || rng.gen_range(-1.0..1.0));
            FeatureMap::new(data, s).unwrap()
        })
        .collect();
    FeaturePyramid::new(levels, h, w).unwrap()
}

fn naive_project(x: &Array3<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    Array3::from_shape_fn((w.ncols(), h, wd), |(o, y, xx)| {
        (0..c).map(|i| x[[i, y, xx]] * w[[i, o]]).sum::<f64>() + b.map_or(0.0, |b| b[o])
    })
}

fn naive_resize(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, ih, iw) = x.dim();
    let src = |o: usize, n_in: usize, n_out: usize| {
        let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        s.max(0.0).min((n_in - 1) as f64)
    };
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        let (sy, sx) = (src(y, ih, oh), src(xx, iw, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        x[[ch, y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + x[[ch, y0, x1]] * (1.0 - fy) * fx
            + x[[ch, y1, x0]] * fy * (1.0 - fx)
            + x[[ch, y1, x1]] * fy * fx
    })
}

fn naive_conv(x: &Array3<f64>, k: &Array4<f64>, b: &Array1<f64>, relu: bool) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((k.dim().0, h, w), |(o, y, xx)| {
        let mut acc = b[o];
        for i in 0..c {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        acc += k[[o, i, dy, dx]] * x[[i, sy as usize, sx as usize]];
                    }
                }
            }
        }
        if relu { acc.max(0.0) } else { acc }
    })
}

fn naive_attention(x: &Array3<f64>, p: &SgcmParams) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let n = h * w;
    let tok = |i: usize, ch: usize| x[[ch, i / w, i % w]];
    let proj = |m: &Array2<f64>| Array2::from_shape_fn((n, c), |(i, o)| (0..c).map(|j| tok(i, j) * m[[j, o]]).sum::<f64>());
    let (q, k, v) = (proj(&p.attn_q), proj(&p.attn_k), proj(&p.attn_v));
    let mut out = x.clone();
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| (0..c).map(|o| q[[i, o]] * k[[j, o]]).sum::<f64>() / (c as f64).sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            out[[ch, i / w, i % w]] += (0..n).map(|j| e[j] / z * v[[j, ch]]).sum::<f64>();
        }
    }
    out
}

fn naive_fuse(pyr: &FeaturePyramid, p: &SgcmParams) -> Array3<f64> {
    let (oh, ow) = (level_size(pyr.image_h, FUSED_STRIDE), level_size(pyr.image_w, FUSED_STRIDE));
    let mut sum = Array3::zeros((pyr.channels(), oh, ow));
    for (i, l) in pyr.levels.iter().enumerate() {
        let src = if i == 4 { naive_attention(&l.data, p) } else { l.data.clone() };
        sum += &naive_resize(&naive_project(&src, &p.level_proj[i], None), oh, ow);
    }
    let x = naive_conv(&sum, &p.conv1, &p.conv1_bias, p.conv_relu);
    naive_conv(&x, &p.conv2, &p.conv2_bias, p.conv_relu)
}

fn max_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fusion_and_reduction_match_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (c, h, w, relu) in [(3, 64, 48, true), (2, 100, 70, false), (4, 130, 130, true)] {
        let pyr = random_pyramid(&mut rng, c, h, w);
        let mut p = SgcmParams::random(c, rng.gen());
        p.conv_relu = relu;
        let fused = fuse_pyramid(&pyr, &p).unwrap();
        assert_eq!(fused.stride, FUSED_STRIDE);
        assert!(max_diff(&fused.data, &naive_fuse(&pyr, &p)) < 1e-10);

        let logits = mask_logits(&fused, &p);
        assert!(max_diff(&logits, &naive_project(&fused.data, &p.mask_head, Some(&p.mask_bias))) < 1e-12);

        let reduced = reduce(&pyr, &fused, &p).unwrap();
        let sem = naive_project(&fused.data, &p.semantic_proj, Some(&p.semantic_bias));
        for (orig, out) in pyr.levels.iter().zip(&reduced.levels) {
            let want = &orig.data + &naive_resize(&sem, orig.height(), orig.width());
            assert!(max_diff(&out.data, &want) < 1e-12);
            assert_eq!(out.stride, orig.stride);
        }
    }
}

#[test]
fn reduce_with_zero_semantics_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pyr = random_pyramid(&mut rng, 2, 40, 40);
    let mut p = SgcmParams::identity(2);
    p.semantic_proj.fill(0.0);
    let fused = fuse_pyramid(&pyr, &p).unwrap();
    assert_eq!(reduce(&pyr, &fused, &p).unwrap(), pyr);
}

#[test]
fn seg_loss_gradient_matches_finite_differences_on_larger_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let eps = 1e-4;
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let logits = Array3::from_shape_simple_fn((2, h, w), || rng.gen_range(-4.0..4.0));
        let mask = Array2::from_shape_simple_fn((h, w), || rng.gen_range(0..2u8));
        let (_, g) = seg_loss(&logits, &mask).unwrap();
        for (idx, &gv) in g.indexed_iter() {
            let mut a = logits.clone();
            a[idx] += eps;
            let mut b = logits.clone();
            b[idx] -= eps;
            let fd = (seg_loss(&a, &mask).unwrap().0 - seg_loss(&b, &mask).unwrap().0) / (2.0 * eps);
            assert!((gv - fd).abs() <= 1e-5 * gv.abs().max(fd.abs()), "{gv} vs {fd}");
        }
        // Gradient per position sums to zero over classes.
        for y in 0..h {
            for x in 0..w {
                assert!((g[[0, y, x]] + g[[1, y, x]]).abs() < 1e-15);
            }
        }
    }
}

/// Cell-centre containment via edge cross products on the corner polygon.
fn polygon_contains(b: &Obb, px: f64, py: f64) -> bool {
    let c = b.corner_points();
    (0..4).all(|i| {
        let (a, d) = (c[i], c[(i + 1) % 4]);
        (d.x - a.x) * (py - a.y) - (d.y - a.y) * (px - a.x) >= -1e-9
    })
}

#[test]
fn pseudo_mask_matches_point_in_polygon() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let boxes: Vec<Obb> = (0..rng.gen_range(0..6))
            .map(|_| {
                Obb::new(
                    rng.gen_range(0.0..200.0),
                    rng.gen_range(0.0..150.0),
                    rng.gen_range(5.0..90.0),
                    rng.gen_range(5.0..90.0),
                    rng.gen_range(-1.5..1.5),
                )
                .unwrap()
            })
            .collect();
        let mask = rasterize_pseudo_mask(&boxes, 150, 200, 8);
        assert_eq!(mask.dim(), (19, 25));
        for ((r, c), &v) in mask.indexed_iter() {
            let (px, py) = ((c as f64 + 0.5) * 8.0, (r as f64 + 0.5) * 8.0);
            let want = boxes.iter().any(|b| polygon_contains(b, px, py));
            assert_eq!(v == 1, want, "cell ({r},{c})");
        }
    }
}
