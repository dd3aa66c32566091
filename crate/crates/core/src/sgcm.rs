//! Toy-scale semantic context mining over a five-level feature pyramid.
//!
//! Fusion: self-attention on the stride-64 level, per-level 1×1
//! projections, bilinear resize to the stride-8 grid, sum, then two 3×3
//! convolutions. Supervision: a pseudo-mask rasterised from oriented boxes
//! and a pixel-wise two-class cross-entropy. Reduction: a 1×1 projection
//! of the fused map, resized and added back onto every level.
//!
//! Maps are `C×H×W`. 1×1 projections are `C_in×C_out` matrices applied to
//! each position's channel vector as a row (`x · W`).

use std::io::Write;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Obb, Point};

/// Strides of P2..P6.
pub const PYRAMID_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];
/// Stride of the fused feature (the P3 grid).
pub const FUSED_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape("feature map must be at least 1x1"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("feature map has non-finite entries".into()));
        }
        Ok(Self { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Positions as rows: `(H·W) × C`, row-major over (y, x).
    pub fn tokens(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        let mut t = Array2::zeros((h * w, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t[[y * w + x, ch]] = self.data[[ch, y, x]];
                }
            }
        }
        t
    }

    fn from_tokens(tokens: &Array2<f64>, h: usize, w: usize, stride: usize) -> Self {
        let c = tokens.ncols();
        let mut data = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[[ch, y, x]] = tokens[[y * w + x, ch]];
                }
            }
        }
        Self { data, stride }
    }
}

/// Five maps at strides 4..64 over one input image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub image_h: usize,
    pub image_w: usize,
}

/// Grid size of a level: ceil(image / stride).
pub fn level_size(image: usize, stride: usize) -> usize {
    image.div_ceil(stride)
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>, image_h: usize, image_w: usize) -> Result<Self> {
        if levels.len() != PYRAMID_STRIDES.len() {
            return Err(Error::shape(format!("expected 5 pyramid levels, got {}", levels.len())));
        }
        let c = levels[0].channels();
        for (l, &stride) in levels.iter().zip(&PYRAMID_STRIDES) {
            let want = (c, level_size(image_h, stride), level_size(image_w, stride));
            if l.stride != stride || l.data.dim() != want {
                return Err(Error::shape(format!(
                    "level at stride {stride}: expected {:?} with stride {stride}, got {:?} with stride {}",
                    want,
                    l.data.dim(),
                    l.stride
                )));
            }
        }
        Ok(Self {
            levels,
            image_h,
            image_w,
        })
    }

    pub fn zeros(channels: usize, image_h: usize, image_w: usize) -> Self {
        let levels = PYRAMID_STRIDES
            .iter()
            .map(|&s| FeatureMap {
                data: Array3::zeros((channels, level_size(image_h, s), level_size(image_w, s))),
                stride: s,
            })
            .collect();
        Self {
            levels,
            image_h,
            image_w,
        }
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }
}

/// Learned weights for fusion, mask prediction, and reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct SgcmParams {
    /// One `C×C` projection per level, P2 first.
    pub level_proj: Vec<Array2<f64>>,
    pub attn_q: Array2<f64>,
    pub attn_k: Array2<f64>,
    pub attn_v: Array2<f64>,
    /// `(C_out, C_in, 3, 3)`.
    pub conv1: Array4<f64>,
    pub conv1_bias: Array1<f64>,
    pub conv2: Array4<f64>,
    pub conv2_bias: Array1<f64>,
    /// ReLU after each 3×3 convolution. Turning it off makes fusion linear.
    pub conv_relu: bool,
    pub semantic_proj: Array2<f64>,
    pub semantic_bias: Array1<f64>,
    /// `C×2` mask logits projection.
    pub mask_head: Array2<f64>,
    pub mask_bias: Array1<f64>,
}

impl SgcmParams {
    /// Identity projections, centre-tap identity kernels, zero biases.
    pub fn identity(c: usize) -> Self {
        let eye = Array2::<f64>::eye(c);
        let mut k = Array4::zeros((c, c, 3, 3));
        for i in 0..c {
            k[[i, i, 1, 1]] = 1.0;
        }
        Self {
            level_proj: vec![eye.clone(); 5],
            attn_q: eye.clone(),
            attn_k: eye.clone(),
            attn_v: eye.clone(),
            conv1: k.clone(),
            conv1_bias: Array1::zeros(c),
            conv2: k,
            conv2_bias: Array1::zeros(c),
            conv_relu: true,
            semantic_proj: eye,
            semantic_bias: Array1::zeros(c),
            mask_head: Array2::zeros((c, 2)),
            mask_bias: Array1::zeros(2),
        }
    }

    /// Seeded weights uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn random(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = 1.0 / (c as f64).sqrt();
        let b3 = 1.0 / ((9 * c) as f64).sqrt();
        let mut mat = |r: usize, k: usize, b: f64| Array2::from_shape_simple_fn((r, k), || rng.gen_range(-b..=b));
        let level_proj = (0..5).map(|_| mat(c, c, b1)).collect();
        let attn_q = mat(c, c, b1);
        let attn_k = mat(c, c, b1);
        let attn_v = mat(c, c, b1);
        let semantic_proj = mat(c, c, b1);
        let mask_head = mat(c, 2, b1);
        let semantic_bias = mat(1, c, b1).remove_axis(Axis(0));
        let mask_bias = mat(1, 2, b1).remove_axis(Axis(0));
        let conv1_bias = mat(1, c, b3).remove_axis(Axis(0));
        let conv2_bias = mat(1, c, b3).remove_axis(Axis(0));
        let mut kern = || Array4::from_shape_simple_fn((c, c, 3, 3), || rng.gen_range(-b3..=b3));
        let conv1 = kern();
        let conv2 = kern();
        Self {
            level_proj,
            attn_q,
            attn_k,
            attn_v,
            conv1,
            conv1_bias,
            conv2,
            conv2_bias,
            conv_relu: true,
            semantic_proj,
            semantic_bias,
            mask_head,
            mask_bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.attn_q.nrows()
    }
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √C)` over positions.
pub fn attention_weights(map: &FeatureMap, params: &SgcmParams) -> Array2<f64> {
    let x = map.tokens();
    let q = x.dot(&params.attn_q);
    let k = x.dot(&params.attn_k);
    let scale = (map.channels() as f64).sqrt();
    let logits = q.dot(&k.t()) / scale;
    crate::relation::softmax_rows(&logits)
}

/// Single-head self-attention over positions with a residual connection.
pub fn self_attention(map: &FeatureMap, params: &SgcmParams) -> FeatureMap {
    let x = map.tokens();
    let v = x.dot(&params.attn_v);
    let out = attention_weights(map, params).dot(&v) + &x;
    FeatureMap::from_tokens(&out, map.height(), map.width(), map.stride)
}

/// Applies a `C_in×C_out` projection (plus optional bias) at every position.
pub fn project_1x1(data: &Array3<f64>, w: &Array2<f64>, bias: Option<&Array1<f64>>) -> Array3<f64> {
    let (c, h, wd) = data.dim();
    let flat = data.view().into_shape_with_order((c, h * wd)).expect("contiguous");
    let mut out = w.t().dot(&flat);
    if let Some(b) = bias {
        for (mut row, &bv) in out.outer_iter_mut().zip(b) {
            row += bv;
        }
    }
    out.into_shape_with_order((w.ncols(), h, wd)).expect("same size")
}

/// Bilinear resize with half-pixel centres; source coordinates are clamped
/// to the valid range.
pub fn bilinear_resize(data: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, in_h, in_w) = data.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return data.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = data[[ch, y0, x0]] * (1.0 - fx) + data[[ch, y0, x1]] * fx;
                let bot = data[[ch, y1, x0]] * (1.0 - fx) + data[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Halves a map's resolution by bilinear resampling (for building synthetic
/// pyramids).
pub fn downsample_2x(map: &FeatureMap) -> FeatureMap {
    let data = bilinear_resize(&map.data, map.height().div_ceil(2), map.width().div_ceil(2));
    FeatureMap {
        data,
        stride: map.stride * 2,
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
pub fn conv3x3(data: &Array3<f64>, kernel: &Array4<f64>, bias: &Array1<f64>) -> Result<Array3<f64>> {
    let (c_in, h, w) = data.dim();
    let (c_out, k_in, kh, kw) = kernel.dim();
    if k_in != c_in || (kh, kw) != (3, 3) || bias.len() != c_out {
        return Err(Error::shape(format!(
            "conv3x3: input has {c_in} channels, kernel is {:?}, bias {}",
            kernel.dim(),
            bias.len()
        )));
    }
    let mut padded = Array3::<f64>::zeros((c_in, h + 2, w + 2));
    padded.slice_mut(s![.., 1..h + 1, 1..w + 1]).assign(data);
    let mut out = Array3::zeros((c_out, h, w));
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for i in 0..c_in {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += kernel[[o, i, dy, dx]] * padded[[i, y + dy, x + dx]];
                        }
                    }
                }
                out[[o, y, x]] = acc;
            }
        }
    }
    Ok(out)
}

/// Multi-scale fusion onto the stride-8 grid.
pub fn fuse_pyramid(pyr: &FeaturePyramid, params: &SgcmParams) -> Result<FeatureMap> {
    let c = pyr.channels();
    if params.level_proj.len() != pyr.levels.len() || params.channels() != c {
        return Err(Error::shape(format!(
            "fuse_pyramid: pyramid has {} levels of {c} channels, params have {} projections of {}",
            pyr.levels.len(),
            params.level_proj.len(),
            params.channels()
        )));
    }
    let out_h = level_size(pyr.image_h, FUSED_STRIDE);
    let out_w = level_size(pyr.image_w, FUSED_STRIDE);
    let mut sum = Array3::<f64>::zeros((c, out_h, out_w));
    let top = pyr.levels.len() - 1;
    for (i, (level, proj)) in pyr.levels.iter().zip(&params.level_proj).enumerate() {
        let attended;
        let src = if i == top {
            attended = self_attention(level, params);
            &attended.data
        } else {
            &level.data
        };
        let projected = project_1x1(src, proj, None);
        sum += &bilinear_resize(&projected, out_h, out_w);
    }
    let relu = |a: &mut Array3<f64>| a.mapv_inplace(|v| v.max(0.0));
    let mut x = conv3x3(&sum, &params.conv1, &params.conv1_bias)?;
    if params.conv_relu {
        relu(&mut x);
    }
    let mut x = conv3x3(&x, &params.conv2, &params.conv2_bias)?;
    if params.conv_relu {
        relu(&mut x);
    }
    Ok(FeatureMap {
        data: x,
        stride: FUSED_STRIDE,
    })
}

/// Two-channel mask logits `(background, building)` from the fused map.
pub fn mask_logits(fused: &FeatureMap, params: &SgcmParams) -> Array3<f64> {
    project_1x1(&fused.data, &params.mask_head, Some(&params.mask_bias))
}

/// Binary pseudo-mask on a `ceil(image/stride)` grid: a cell is set when its
/// centre lies inside (or on) any box.
pub fn rasterize_pseudo_mask(boxes: &[Obb], image_h: usize, image_w: usize, stride: usize) -> Array2<u8> {
    assert!(stride >= 1, "stride must be positive");
    let h = level_size(image_h, stride);
    let w = level_size(image_w, stride);
    let s = stride as f64;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let p = Point::new((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
        u8::from(boxes.iter().any(|b| b.contains(p, 1e-9)))
    })
}

/// Mean two-class softmax cross-entropy and its gradient w.r.t. the logits.
pub fn seg_loss(logits: &Array3<f64>, mask: &Array2<u8>) -> Result<(f64, Array3<f64>)> {
    let (k, h, w) = logits.dim();
    if k != 2 || mask.dim() != (h, w) {
        return Err(Error::shape(format!(
            "seg_loss: logits {:?} vs mask {:?}",
            logits.dim(),
            mask.dim()
        )));
    }
    let n = (h * w) as f64;
    let mut grad = Array3::zeros((2, h, w));
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (logits[[0, y, x]], logits[[1, y, x]]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let target = usize::from(mask[[y, x]] != 0);
            loss += lse - logits[[target, y, x]];
            for c in 0..2 {
                let p = (logits[[c, y, x]] - lse).exp();
                let onehot = if c == target { 1.0 } else { 0.0 };
                grad[[c, y, x]] = (p - onehot) / n;
            }
        }
    }
    Ok((loss / n, grad))
}

/// Adds the projected fused feature back onto every pyramid level.
pub fn reduce(pyr: &FeaturePyramid, fused: &FeatureMap, params: &SgcmParams) -> Result<FeaturePyramid> {
    let want = (
        pyr.channels(),
        level_size(pyr.image_h, FUSED_STRIDE),
        level_size(pyr.image_w, FUSED_STRIDE),
    );
    if fused.data.dim() != want || fused.stride != FUSED_STRIDE || params.semantic_proj.dim() != (want.0, want.0) {
        return Err(Error::shape(format!(
            "reduce: fused map {:?} (stride {}) does not match pyramid grid {:?}",
            fused.data.dim(),
            fused.stride,
            want
        )));
    }
    let semantic = project_1x1(&fused.data, &params.semantic_proj, Some(&params.semantic_bias));
    let levels = pyr
        .levels
        .iter()
        .map(|l| FeatureMap {
            data: &l.data + &bilinear_resize(&semantic, l.height(), l.width()),
            stride: l.stride,
        })
        .collect();
    Ok(FeaturePyramid {
        levels,
        image_h: pyr.image_h,
        image_w: pyr.image_w,
    })
}

/// Writes a binary PGM (P5), 255 for set cells.
pub fn write_pgm(mask: &Array2<u8>, mut out: impl Write) -> std::io::Result<()> {
    let (h, w) = mask.dim();
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rand_map(c: usize, h: usize, w: usize, stride: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Array3::from_shape_simple_fn((c, h, w), || rng.gen_range(-1.0..1.0)), stride).unwrap()
    }

    fn rand_pyramid(c: usize, img: usize, seed: u64) -> FeaturePyramid {
        let levels = PYRAMID_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &s)| rand_map(c, level_size(img, s), level_size(img, s), s, seed + i as u64))
            .collect();
        FeaturePyramid::new(levels, img, img).unwrap()
    }

    #[test]
    fn attention_on_single_token() {
        let p = SgcmParams::random(3, 1);
        let m = rand_map(3, 1, 1, 64, 2);
        let out = self_attention(&m, &p);
        let x = m.tokens();
        let expect = &x + &x.dot(&p.attn_v);
        for ch in 0..3 {
            assert_abs_diff_eq!(out.data[[ch, 0, 0]], expect[[0, ch]], epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_constant_map_stays_constant() {
        let p = SgcmParams::random(4, 9);
        let m = FeatureMap::new(Array3::from_shape_fn((4, 3, 2), |(c, _, _)| c as f64 - 1.5), 64).unwrap();
        let out = self_attention(&m, &p);
        for ch in 0..4 {
            let first = out.data[[ch, 0, 0]];
            assert!(out.data.index_axis(Axis(0), ch).iter().all(|&v| (v - first).abs() < 1e-12));
        }
        for row in attention_weights(&m, &p).outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_two_by_two_identity_projections() {
        // Single channel, tokens [0, 1, 2, 3]; logits are x_i x_j, softmax by hand.
        let m = FeatureMap::new(array![[[0.0, 1.0], [2.0, 3.0]]], 64).unwrap();
        let p = SgcmParams::identity(1);
        let out = self_attention(&m, &p);
        let xs = [0.0f64, 1.0, 2.0, 3.0];
        for (i, &xi) in xs.iter().enumerate() {
            let e: Vec<f64> = xs.iter().map(|&xj| (xi * xj).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: f64 = e.iter().zip(xs).map(|(w, xj)| w / z * xj).sum();
            assert_abs_diff_eq!(out.data[[0, i / 2, i % 2]], xi + ctx, epsilon = 1e-12);
        }
    }

    #[test]
    fn resize_constant_identity_and_closed_form() {
        let ones = Array3::from_elem((2, 3, 5), 1.0);
        let r = bilinear_resize(&ones, 7, 2);
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let m = rand_map(2, 3, 4, 8, 5);
        assert_eq!(bilinear_resize(&m.data, 3, 4), m.data);

        // The source is the linear function 2y + x, which bilinear
        // interpolation reproduces exactly at the clamped sample points.
        let src = array![[[0.0, 1.0], [2.0, 3.0]]];
        let r = bilinear_resize(&src, 4, 4);
        let coord = [0.0, 0.25, 0.75, 1.0];
        for (y, cy) in coord.iter().enumerate() {
            for (x, cx) in coord.iter().enumerate() {
                assert_abs_diff_eq!(r[[0, y, x]], 2.0 * cy + cx, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn downsample_helper() {
        let m = rand_map(2, 5, 4, 32, 1);
        let d = downsample_2x(&m);
        assert_eq!(d.data.dim(), (2, 3, 2));
        assert_eq!(d.stride, 64);
    }

    #[test]
    fn pyramid_validation() {
        let good = PyramidFixture::levels(2, 64);
        assert!(FeaturePyramid::new(good.clone(), 64, 64).is_ok());
        assert!(FeaturePyramid::new(good[..4].to_vec(), 64, 64).is_err());
        let mut bad = good;
        bad[2].stride = 8;
        assert!(FeaturePyramid::new(bad, 64, 64).is_err());
    }

    struct PyramidFixture;
    impl PyramidFixture {
        fn levels(c: usize, img: usize) -> Vec<FeatureMap> {
            FeaturePyramid::zeros(c, img, img).levels
        }
    }

    #[test]
    fn fuse_zero_pyramid_is_zero() {
        let mut p = SgcmParams::random(3, 4);
        p.conv1_bias.fill(0.0);
        p.conv2_bias.fill(0.0);
        let fused = fuse_pyramid(&FeaturePyramid::zeros(3, 64, 64), &p).unwrap();
        assert_eq!(fused.data.dim(), (3, 8, 8));
        assert_eq!(fused.stride, 8);
        assert!(fused.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_single_level_identity() {
        let mut pyr = FeaturePyramid::zeros(2, 64, 64);
        let lvl = rand_map(2, 4, 4, 16, 3);
        pyr.levels[2] = lvl.clone();
        let mut p = SgcmParams::identity(2);
        p.conv_relu = false;
        let fused = fuse_pyramid(&pyr, &p).unwrap();
        assert_eq!(fused.data, bilinear_resize(&lvl.data, 8, 8));
    }

    #[test]
    fn fuse_is_additive_without_relu() {
        let mut p = SgcmParams::random(3, 11);
        p.conv_relu = false;
        p.conv1_bias.fill(0.0);
        p.conv2_bias.fill(0.0);
        // Keep the attended level at zero so the attention nonlinearity stays out of the sum.
        let mut a = rand_pyramid(3, 64, 20);
        let mut b = rand_pyramid(3, 64, 40);
        a.levels[4].data.fill(0.0);
        b.levels[4].data.fill(0.0);
        let mut sum = a.clone();
        for (l, r) in sum.levels.iter_mut().zip(&b.levels) {
            l.data += &r.data;
        }
        let fa = fuse_pyramid(&a, &p).unwrap().data;
        let fb = fuse_pyramid(&b, &p).unwrap().data;
        let fs = fuse_pyramid(&sum, &p).unwrap().data;
        for ((x, y), z) in fa.iter().zip(&fb).zip(&fs) {
            assert!((x + y - z).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_identity_kernel_and_shape_error() {
        let p = SgcmParams::identity(2);
        let m = rand_map(2, 3, 3, 8, 1);
        assert_eq!(conv3x3(&m.data, &p.conv1, &p.conv1_bias).unwrap(), m.data);
        assert!(conv3x3(&rand_map(3, 3, 3, 8, 1).data, &p.conv1, &p.conv1_bias).is_err());
    }

    #[test]
    fn conv_zero_padding_at_border() {
        // All-ones 3x3 kernel sums each 3x3 neighbourhood.
        let k = Array4::from_elem((1, 1, 3, 3), 1.0);
        let x = Array3::from_elem((1, 3, 3), 1.0);
        let y = conv3x3(&x, &k, &array![0.0]).unwrap();
        assert_eq!(y.index_axis(Axis(0), 0), array![[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]]);
    }

    #[test]
    fn mask_examples() {
        assert!(rasterize_pseudo_mask(&[], 32, 32, 4).iter().all(|&v| v == 0));
        let b = Obb::new(8.0, 8.0, 16.0, 16.0, 0.0).unwrap();
        let m = rasterize_pseudo_mask(&[b], 32, 32, 4);
        assert_eq!(m.dim(), (8, 8));
        for ((r, c), &v) in m.indexed_iter() {
            assert_eq!(v, u8::from(r < 4 && c < 4), "cell ({r},{c})");
        }
        let full = Obb::new(16.0, 16.0, 32.0, 32.0, 0.0).unwrap();
        assert!(rasterize_pseudo_mask(&[full], 32, 32, 8).iter().all(|&v| v == 1));
    }

    #[test]
    fn mask_half_turn_invariant() {
        let b = Obb::new(20.0, 13.0, 17.0, 6.0, 0.4).unwrap();
        let r = Obb::new(20.0, 13.0, 17.0, 6.0, 0.4 + std::f64::consts::PI).unwrap();
        assert_eq!(rasterize_pseudo_mask(&[b], 40, 40, 2), rasterize_pseudo_mask(&[r], 40, 40, 2));
    }

    #[test]
    fn loss_uniform_and_saturated() {
        let mask = array![[0u8, 1], [1, 1]];
        let (l, g) = seg_loss(&Array3::zeros((2, 2, 2)), &mask).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[1, 0, 0]], 0.5 / 4.0, epsilon = 1e-15);
        let logits = Array3::from_shape_fn((2, 2, 2), |(c, y, x)| {
            let on = mask[[y, x]] == 1;
            if (c == 1) == on { 20.0 } else { -20.0 }
        });
        assert!(seg_loss(&logits, &mask).unwrap().0 < 1e-8);
        assert!(seg_loss(&Array3::zeros((2, 3, 2)), &mask).is_err());
        assert!(seg_loss(&Array3::zeros((3, 2, 2)), &mask).is_err());
    }

    #[test]
    fn reduce_identities() {
        let pyr = rand_pyramid(2, 32, 7);
        let zero_fused = FeatureMap { data: Array3::zeros((2, 4, 4)), stride: 8 };
        let p = SgcmParams::identity(2);
        assert_eq!(reduce(&pyr, &zero_fused, &p).unwrap(), pyr);

        let fused = rand_map(2, 4, 4, 8, 99);
        let out = reduce(&FeaturePyramid::zeros(2, 32, 32), &fused, &p).unwrap();
        for l in &out.levels {
            assert_eq!(l.data, bilinear_resize(&fused.data, l.height(), l.width()));
        }
        let wrong = rand_map(2, 3, 4, 8, 1);
        assert!(reduce(&pyr, &wrong, &p).is_err());
    }

    #[test]
    fn pgm_bytes() {
        let mut buf = Vec::new();
        write_pgm(&array![[0u8, 1, 1], [1, 0, 0]], &mut buf).unwrap();
        assert_eq!(buf, b"P5\n3 2\n255\n\x00\xff\xff\xff\x00\x00");
    }
}
