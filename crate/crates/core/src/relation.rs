//! Instance-context relation graph over RoIs.
//!
//! Every RoI is a query. Keys are the RoIs surviving a 0.5-IoU NMS. The
//! spatial affinity between query `i` and key `j` is
//!
//! ```text
//! d = ((xq_i - xk_j) / max(wq_i, 56), (yq_i - yk_j) / max(hq_i, 56))
//! S = exp(-|d| / 2)
//! ```
//!
//! `S` is thresholded into a binary adjacency `A`, row-normalised by its
//! degree, and used to average projected key features into each query:
//! `F' = ReLU(Â · F_k + F_q)`.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Obb;
use crate::nms::filter_keys_at;

/// Lower clamp on query extents when normalising center offsets.
pub const MIN_EXTENT: f64 = 56.0;
/// Affinity threshold for the adjacency matrix.
pub const RELATION_THRESHOLD: f64 = 0.1;
/// Number of stacked relation layers.
pub const ICMM_STACKS: usize = 2;

/// Dense RoI feature matrix, one row per RoI.
pub type FeatureMatrix = Array2<f64>;

/// Spatial affinity `S` between `queries` (rows) and `keys` (columns).
/// Normalisation uses the query extents only, clamped below at `min_extent`.
pub fn spatial_affinity(queries: &[Obb], keys: &[Obb], min_extent: f64) -> Array2<f64> {
    let mut s = Array2::<f64>::zeros((queries.len(), keys.len()));
    for (mut row, q) in s.outer_iter_mut().zip(queries) {
        let sx = q.w.max(min_extent);
        let sy = q.h.max(min_extent);
        for (v, k) in row.iter_mut().zip(keys) {
            let dx = (q.cx - k.cx) / sx;
            let dy = (q.cy - k.cy) / sy;
            *v = (-dx.hypot(dy) / 2.0).exp();
        }
    }
    s
}

/// Binary adjacency: 1 where `S >= t`.
pub fn quantize(s: &Array2<f64>, t: f64) -> Array2<u8> {
    s.mapv(|v| u8::from(v >= t))
}

/// Row-normalises `A` by its degree. Rows with zero degree stay all-zero.
pub fn normalize(a: &Array2<u8>) -> Array2<f64> {
    let mut out = a.mapv(f64::from);
    for mut row in out.outer_iter_mut() {
        let deg: f64 = row.sum();
        if deg > 0.0 {
            row.mapv_inplace(|v| v / deg);
        }
    }
    out
}

/// `ReLU(Â · F_k + F_q)`.
pub fn aggregate(a_hat: &Array2<f64>, f_k: &FeatureMatrix, f_q: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (n, m) = a_hat.dim();
    if f_k.nrows() != m || f_q.nrows() != n || f_k.ncols() != f_q.ncols() {
        return Err(Error::shape(format!(
            "aggregate: Â is {n}x{m}, F_k is {}x{}, F_q is {}x{}",
            f_k.nrows(),
            f_k.ncols(),
            f_q.nrows(),
            f_q.ncols()
        )));
    }
    let mut out = a_hat.dot(f_k);
    out += f_q;
    out.mapv_inplace(|v| v.max(0.0));
    Ok(out)
}

/// The three matrices describing query–key spatial relations.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    pub affinity: Array2<f64>,
    pub adjacency: Array2<u8>,
    pub normalized: Array2<f64>,
    pub threshold: f64,
}

impl RelationGraph {
    pub fn build(queries: &[Obb], keys: &[Obb], min_extent: f64, threshold: f64) -> Self {
        let affinity = spatial_affinity(queries, keys, min_extent);
        let adjacency = quantize(&affinity, threshold);
        let normalized = normalize(&adjacency);
        Self {
            affinity,
            adjacency,
            normalized,
            threshold,
        }
    }
}

/// Query and key projections of one relation layer (both `C×C`, applied
/// as `F · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct RelationLayer {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
}

/// Two fully connected layers: `C×C` with ReLU, then `C×2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmmParams {
    /// One entry per stacked layer.
    pub layers: Vec<RelationLayer>,
    pub head: ClassifierHead,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound))
}

impl IcmmParams {
    /// Seeded initialisation, every entry uniform in `[-1/√C, 1/√C]`.
    pub fn random(channels: usize, stacks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (channels.max(1) as f64).sqrt();
        let layers = (0..stacks)
            .map(|_| RelationLayer {
                w_q: uniform(&mut rng, (channels, channels), bound),
                w_k: uniform(&mut rng, (channels, channels), bound),
            })
            .collect();
        let head = ClassifierHead {
            w1: uniform(&mut rng, (channels, channels), bound),
            b1: uniform(&mut rng, (1, channels), bound).remove_axis(Axis(0)),
            w2: uniform(&mut rng, (channels, 2), bound),
            b2: uniform(&mut rng, (1, 2), bound).remove_axis(Axis(0)),
        };
        Self { layers, head }
    }

    /// Identity projections and a zero head.
    pub fn identity(channels: usize, stacks: usize) -> Self {
        let eye = Array2::<f64>::eye(channels);
        Self {
            layers: (0..stacks)
                .map(|_| RelationLayer {
                    w_q: eye.clone(),
                    w_k: eye.clone(),
                })
                .collect(),
            head: ClassifierHead {
                w1: eye,
                b1: Array1::zeros(channels),
                w2: Array2::zeros((channels, 2)),
                b2: Array1::zeros(2),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.head.w1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (i, l) in self.layers.iter().enumerate() {
            if l.w_q.dim() != (c, c) || l.w_k.dim() != (c, c) {
                return Err(Error::shape(format!("layer {i}: projections must be {c}x{c}")));
            }
        }
        let h = &self.head;
        if h.w1.dim() != (c, c) || h.b1.len() != c || h.w2.dim() != (c, 2) || h.b2.len() != 2 {
            return Err(Error::shape(format!("classifier head inconsistent with C={c}")));
        }
        let finite = self
            .layers
            .iter()
            .flat_map(|l| l.w_q.iter().chain(l.w_k.iter()))
            .chain(h.w1.iter())
            .chain(h.b1.iter())
            .chain(h.w2.iter())
            .chain(h.b2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite weight".into()));
        }
        Ok(())
    }
}

/// Settings for [`icmm_forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcmmConfig {
    pub stacks: usize,
    pub key_nms_iou: f64,
    pub threshold: f64,
    pub min_extent: f64,
}

impl Default for IcmmConfig {
    fn default() -> Self {
        Self {
            stacks: ICMM_STACKS,
            key_nms_iou: crate::nms::KEY_NMS_IOU,
            threshold: RELATION_THRESHOLD,
            min_extent: MIN_EXTENT,
        }
    }
}

/// Intermediate values of a relation-module pass.
#[derive(Debug, Clone)]
pub struct IcmmTrace {
    pub key_indices: Vec<usize>,
    /// The graph is a function of the boxes alone, so it is shared by all stacks.
    pub graph: RelationGraph,
    /// Output of each stack, in order.
    pub outputs: Vec<FeatureMatrix>,
}

/// Runs the stacked relation layers and records intermediates.
///
/// `key_scores` ranks RoIs for the key NMS. Boxes are the same for every
/// stack; only features change.
pub fn icmm_trace(
    rois: &[Obb],
    key_scores: &[f64],
    features: &FeatureMatrix,
    params: &IcmmParams,
    cfg: &IcmmConfig,
) -> Result<IcmmTrace> {
    if cfg.stacks == 0 {
        return Err(Error::Validation("at least one relation stack is required".into()));
    }
    if params.layers.len() < cfg.stacks {
        return Err(Error::shape(format!(
            "{} stacks requested but only {} layers supplied",
            cfg.stacks,
            params.layers.len()
        )));
    }
    let c = params.channels();
    if features.ncols() != c {
        return Err(Error::shape(format!(
            "features have {} channels, weights expect {c}",
            features.ncols()
        )));
    }
    let keys = filter_keys_at(rois, features, key_scores, cfg.key_nms_iou)?;
    let graph = RelationGraph::build(rois, &keys.boxes, cfg.min_extent, cfg.threshold);

    let mut outputs = Vec::with_capacity(cfg.stacks);
    let mut current = features.clone();
    for layer in &params.layers[..cfg.stacks] {
        let f_q = current.dot(&layer.w_q);
        let f_k = current.select(Axis(0), &keys.indices).dot(&layer.w_k);
        current = aggregate(&graph.normalized, &f_k, &f_q)?;
        outputs.push(current.clone());
    }
    Ok(IcmmTrace {
        key_indices: keys.indices,
        graph,
        outputs,
    })
}

/// Context-enhanced RoI features after `cfg.stacks` relation layers.
pub fn icmm_forward(
    rois: &[Obb],
    key_scores: &[f64],
    features: &FeatureMatrix,
    params: &IcmmParams,
    cfg: &IcmmConfig,
) -> Result<FeatureMatrix> {
    let mut trace = icmm_trace(rois, key_scores, features, params, cfg)?;
    Ok(trace.outputs.pop().expect("at least one stack"))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Two-class probabilities `[background, building]` per RoI.
pub fn classify(features: &FeatureMatrix, head: &ClassifierHead) -> Result<Array2<f64>> {
    let c = head.w1.nrows();
    if features.ncols() != c || head.w1.ncols() != head.b1.len() || head.w2.dim() != (head.b1.len(), 2) || head.b2.len() != 2 {
        return Err(Error::shape(format!(
            "classify: features have {} channels, head expects {c}",
            features.ncols()
        )));
    }
    let mut hidden = features.dot(&head.w1);
    hidden += &head.b1;
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut logits = hidden.dot(&head.w2);
    logits += &head.b2;
    Ok(softmax_rows(&logits))
}
