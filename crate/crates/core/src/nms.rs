//! Greedy rotated non-maximum suppression.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, Obb};

/// IoU threshold used when filtering RoIs down to relation-graph keys.
pub const KEY_NMS_IOU: f64 = 0.5;

/// A scored oriented box belonging to one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub obb: Obb,
    pub score: f64,
    pub image_id: String,
    #[serde(default)]
    pub region_id: String,
    /// 0 = background, 1 = building.
    #[serde(default = "building_class")]
    pub class_id: u8,
}

fn building_class() -> u8 {
    1
}

impl ScoredDetection {
    pub fn new(obb: Obb, score: f64, image_id: impl Into<String>) -> Self {
        Self {
            obb,
            score,
            image_id: image_id.into(),
            region_id: String::new(),
            class_id: 1,
        }
    }

    pub fn with_region(mut self, region_id: impl Into<String>) -> Self {
        self.region_id = region_id.into();
        self
    }
}

/// Parameters of one NMS pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub iou_threshold: f64,
    /// `None` keeps every survivor.
    pub max_keep: Option<usize>,
    pub score_floor: f64,
}

impl NmsParams {
    pub fn new(iou_threshold: f64) -> Self {
        Self {
            iou_threshold,
            max_keep: None,
            score_floor: 0.0,
        }
    }
}

/// Indices of `scores` ordered by descending score, ties by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS over parallel box/score slices. Returns kept indices in
/// descending score order.
///
/// A box survives iff its score is at least `score_floor` and its IoU with
/// every previously kept box is strictly below `iou_threshold`.
pub fn nms_boxes(boxes: &[Obb], scores: &[f64], params: &NmsParams) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let cap = params.max_keep.unwrap_or(usize::MAX);
    let mut kept: Vec<usize> = Vec::new();
    if cap == 0 {
        return kept;
    }
    for i in score_order(scores) {
        if scores[i] < params.score_floor {
            // Everything after this is lower still.
            break;
        }
        let b = &boxes[i];
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[k], b) < params.iou_threshold)
        {
            kept.push(i);
            if kept.len() >= cap {
                break;
            }
        }
    }
    kept
}

/// Greedy NMS over detections (class-agnostic).
pub fn nms(dets: &[ScoredDetection], params: &NmsParams) -> Vec<usize> {
    let boxes: Vec<Obb> = dets.iter().map(|d| d.obb).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_boxes(&boxes, &scores, params)
}

/// Result of key filtering: surviving boxes, their feature rows, and the
/// indices they were gathered from.
#[derive(Debug, Clone)]
pub struct KeySet {
    pub boxes: Vec<Obb>,
    pub features: Array2<f64>,
    pub indices: Vec<usize>,
}

/// Keeps the RoIs surviving NMS at IoU 0.5 (no floor, no cap) and gathers
/// their feature rows.
pub fn filter_keys(rois: &[Obb], features: &Array2<f64>, scores: &[f64]) -> Result<KeySet> {
    filter_keys_at(rois, features, scores, KEY_NMS_IOU)
}

/// [`filter_keys`] with an explicit IoU threshold.
pub fn filter_keys_at(
    rois: &[Obb],
    features: &Array2<f64>,
    scores: &[f64],
    iou_threshold: f64,
) -> Result<KeySet> {
    if features.nrows() != rois.len() || scores.len() != rois.len() {
        return Err(Error::shape(format!(
            "filter_keys: {} rois, {} feature rows, {} scores",
            rois.len(),
            features.nrows(),
            scores.len()
        )));
    }
    let indices = nms_boxes(rois, scores, &NmsParams::new(iou_threshold));
    let boxes = indices.iter().map(|&i| rois[i]).collect();
    let features = features.select(ndarray::Axis(0), &indices);
    Ok(KeySet {
        boxes,
        features,
        indices,
    })
}
