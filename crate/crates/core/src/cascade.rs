//! Inference-side orchestration of the two classification stages.
//!
//! Stage-one scores `C1` come in with the RoIs. The relation head produces
//! `C2`; the final building score is column 1 of `(C1 + C2) / 2`. Boxes are
//! taken as already refined, so row `i` of every matrix refers to RoI `i`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Obb;
use crate::nms::{nms_boxes, NmsParams, ScoredDetection, KEY_NMS_IOU};
use crate::relation::{classify, icmm_forward, FeatureMatrix, IcmmConfig, IcmmParams, ICMM_STACKS, MIN_EXTENT, RELATION_THRESHOLD};

/// IoU threshold of the final post-processing NMS.
pub const FINAL_NMS_IOU: f64 = 0.1;
/// Detections scoring below this are dropped at test time.
pub const SCORE_FLOOR: f64 = 0.05;
/// Detections kept per image.
pub const MAX_BOXES: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub final_nms_iou: f64,
    pub score_floor: f64,
    pub max_boxes: usize,
    pub key_nms_iou: f64,
    pub icmm_stacks: usize,
    pub relation_t: f64,
    pub min_extent: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            final_nms_iou: FINAL_NMS_IOU,
            score_floor: SCORE_FLOOR,
            max_boxes: MAX_BOXES,
            key_nms_iou: KEY_NMS_IOU,
            icmm_stacks: ICMM_STACKS,
            relation_t: RELATION_THRESHOLD,
            min_extent: MIN_EXTENT,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("final_nms_iou", self.final_nms_iou),
            ("score_floor", self.score_floor),
            ("key_nms_iou", self.key_nms_iou),
            ("relation_t", self.relation_t),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.max_boxes == 0 || self.icmm_stacks == 0 {
            return Err(Error::Validation("max_boxes and icmm_stacks must be at least 1".into()));
        }
        if !(self.min_extent.is_finite() && self.min_extent >= 0.0) {
            return Err(Error::Validation(format!("min_extent must be non-negative, got {}", self.min_extent)));
        }
        Ok(())
    }

    /// Reads a TOML or JSON config (by extension; anything but `.json` is
    /// parsed as TOML). Missing fields take their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message,
        };
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn icmm(&self) -> IcmmConfig {
        IcmmConfig {
            stacks: self.icmm_stacks,
            key_nms_iou: self.key_nms_iou,
            threshold: self.relation_t,
            min_extent: self.min_extent,
        }
    }

    pub fn final_nms(&self) -> NmsParams {
        NmsParams {
            iou_threshold: self.final_nms_iou,
            max_keep: Some(self.max_boxes),
            score_floor: self.score_floor,
        }
    }
}

/// Boxes and `[background, building]` scores from one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub boxes: Vec<Obb>,
    pub scores: Array2<f64>,
}

impl StageOutput {
    pub fn new(boxes: Vec<Obb>, scores: Array2<f64>) -> Result<Self> {
        if scores.nrows() != boxes.len() || scores.ncols() != 2 {
            return Err(Error::shape(format!(
                "{} boxes but score matrix is {:?}",
                boxes.len(),
                scores.dim()
            )));
        }
        for (i, row) in scores.outer_iter().enumerate() {
            if (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("score row {i} sums to {}", row.sum())));
            }
        }
        Ok(Self { boxes, scores })
    }
}

/// Element-wise mean of two stages' score matrices.
pub fn fuse_scores(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<Array2<f64>> {
    if c1.dim() != c2.dim() {
        return Err(Error::shape(format!("fuse_scores: {:?} vs {:?}", c1.dim(), c2.dim())));
    }
    Ok((c1 + c2) / 2.0)
}

/// Floor, rotated NMS, and cap on the fused building scores. Output is
/// sorted by descending score.
pub fn finalize(
    stage2: &StageOutput,
    fused_scores: &Array2<f64>,
    cfg: &PipelineConfig,
    image_id: &str,
) -> Result<Vec<ScoredDetection>> {
    if fused_scores.dim() != (stage2.boxes.len(), 2) {
        return Err(Error::shape(format!(
            "finalize: {} boxes, fused scores {:?}",
            stage2.boxes.len(),
            fused_scores.dim()
        )));
    }
    let building: Vec<f64> = fused_scores.column(1).to_vec();
    let kept = nms_boxes(&stage2.boxes, &building, &cfg.final_nms());
    Ok(kept
        .into_iter()
        .map(|i| ScoredDetection::new(stage2.boxes[i], building[i], image_id))
        .collect())
}

/// Full inference path for one image: relation features, stage-two
/// classification, score fusion, and [`finalize`].
pub fn run_cascade(
    rois: &[Obb],
    roi_features: &FeatureMatrix,
    stage1_scores: &Array2<f64>,
    params: &IcmmParams,
    cfg: &PipelineConfig,
    image_id: &str,
) -> Result<Vec<ScoredDetection>> {
    cfg.validate()?;
    if stage1_scores.dim() != (rois.len(), 2) {
        return Err(Error::shape(format!(
            "{} rois but stage-one scores are {:?}",
            rois.len(),
            stage1_scores.dim()
        )));
    }
    if rois.is_empty() {
        return Ok(Vec::new());
    }
    let key_scores: Vec<f64> = stage1_scores.column(1).to_vec();
    let enhanced = icmm_forward(rois, &key_scores, roi_features, params, &cfg.icmm())?;
    let c2 = classify(&enhanced, &params.head)?;
    let fused = fuse_scores(stage1_scores, &c2)?;
    let stage2 = StageOutput::new(rois.to_vec(), c2)?;
    finalize(&stage2, &fused, cfg, image_id)
}

/// Sum of the training loss terms (RPN cls/reg, segmentation, and both
/// heads' cls/reg), all with unit weight.
pub fn total_loss(terms: &[f64]) -> f64 {
    terms.iter().sum()
}
