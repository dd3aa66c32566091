//! Rotated average precision with VOC2012 all-points interpolation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, Obb};
use crate::nms::{score_order, ScoredDetection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub obb: Obb,
    pub image_id: String,
    pub region_id: String,
}

/// Per-image matching outcome. Vectors are indexed like the inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub is_tp: Vec<bool>,
    /// GT index each detection matched, if any.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching for one image. Detections are visited by descending
/// score; each claims the unmatched GT with the highest IoU, provided that
/// IoU is at least `iou_thresh`. IoU ties go to the lower GT index.
pub fn match_detections(dets: &[ScoredDetection], gts: &[GroundTruthBox], iou_thresh: f64) -> MatchResult {
    let gt_boxes: Vec<Obb> = gts.iter().map(|g| g.obb).collect();
    let dt_boxes: Vec<Obb> = dets.iter().map(|d| d.obb).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    match_boxes(&dt_boxes, &scores, &gt_boxes, iou_thresh)
}

fn match_boxes(dets: &[Obb], scores: &[f64], gts: &[Obb], iou_thresh: f64) -> MatchResult {
    let mut res = MatchResult {
        is_tp: vec![false; dets.len()],
        matched_gt: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for d in score_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if res.gt_matched[g] {
                continue;
            }
            let iou = rotated_iou(&dets[d], gt);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            res.gt_matched[g] = true;
            res.is_tp[d] = true;
            res.matched_gt[d] = Some(g);
        }
    }
    res
}

/// `(recall, precision)` after each detection, given TP/FP labels in
/// descending score order.
pub fn pr_points(labels: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-points interpolated AP: the area under the precision envelope
/// (precision made non-increasing in recall). Zero when there is no GT.
pub fn average_precision(labels: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let pts = pr_points(labels, num_gt);
    let mut recall = Vec::with_capacity(pts.len() + 2);
    let mut precision = Vec::with_capacity(pts.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    for &(r, p) in &pts {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub iou_thresh: f64,
    pub per_region_ap: BTreeMap<String, f64>,
    /// AP over all detections and GTs pooled.
    pub overall_ap: f64,
    /// Unweighted mean of per-region APs over regions that have GT.
    pub macro_ap: Option<f64>,
    /// Pooled `(recall, precision)` curve.
    pub pr_curve: Vec<(f64, f64)>,
    pub num_gt: usize,
    pub num_dets: usize,
}

struct Labeled {
    score: f64,
    tp: bool,
    region: Option<String>,
    index: usize,
}

/// Evaluates detections against ground truth at one IoU threshold.
///
/// Matching runs per image; AP is then computed over the pooled, score
/// ranked detections, per region (when `group_by_region`) and overall.
pub fn evaluate(
    dets: &[ScoredDetection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
    group_by_region: bool,
) -> Result<EvalResult> {
    let mut image_region: HashMap<&str, &str> = HashMap::new();
    for g in gts {
        match image_region.insert(&g.image_id, &g.region_id) {
            Some(prev) if prev != g.region_id => {
                return Err(Error::Validation(format!(
                    "image {} has ground truth in regions {prev} and {}",
                    g.image_id, g.region_id
                )))
            }
            _ => {}
        }
    }
    let regions: BTreeSet<&str> = gts.iter().map(|g| g.region_id.as_str()).collect();

    let mut det_regions: Vec<Option<&str>> = Vec::with_capacity(dets.len());
    for d in dets {
        let from_image = image_region.get(d.image_id.as_str()).copied();
        let region = if d.region_id.is_empty() {
            from_image
        } else {
            if !regions.contains(d.region_id.as_str()) {
                return Err(Error::Validation(format!(
                    "detection on image {} names unknown region {}",
                    d.image_id, d.region_id
                )));
            }
            if from_image.is_some_and(|r| r != d.region_id) {
                return Err(Error::Validation(format!(
                    "detection on image {} names region {}, ground truth says {}",
                    d.image_id,
                    d.region_id,
                    from_image.unwrap()
                )));
            }
            Some(d.region_id.as_str())
        };
        det_regions.push(region);
    }

    let mut by_image: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(&d.image_id).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(&g.image_id).or_default().1.push(i);
    }
    let groups: Vec<_> = by_image.into_values().collect();
    let per_image: Vec<Vec<(usize, bool)>> = groups
        .par_iter()
        .map(|(di, gi)| {
            let boxes: Vec<Obb> = di.iter().map(|&i| dets[i].obb).collect();
            let scores: Vec<f64> = di.iter().map(|&i| dets[i].score).collect();
            let gboxes: Vec<Obb> = gi.iter().map(|&i| gts[i].obb).collect();
            let m = match_boxes(&boxes, &scores, &gboxes, iou_thresh);
            di.iter().zip(m.is_tp).map(|(&i, tp)| (i, tp)).collect()
        })
        .collect();

    let mut labeled: Vec<Labeled> = per_image
        .into_iter()
        .flatten()
        .map(|(i, tp)| Labeled {
            score: dets[i].score,
            tp,
            region: det_regions[i].map(str::to_owned),
            index: i,
        })
        .collect();
    labeled.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));

    let all_labels: Vec<bool> = labeled.iter().map(|l| l.tp).collect();
    let mut result = EvalResult {
        iou_thresh,
        overall_ap: average_precision(&all_labels, gts.len()),
        pr_curve: pr_points(&all_labels, gts.len()),
        num_gt: gts.len(),
        num_dets: dets.len(),
        ..Default::default()
    };

    if group_by_region {
        let mut gt_count: BTreeMap<&str, usize> = BTreeMap::new();
        for g in gts {
            *gt_count.entry(&g.region_id).or_default() += 1;
        }
        for (region, &n) in &gt_count {
            let labels: Vec<bool> = labeled
                .iter()
                .filter(|l| l.region.as_deref() == Some(*region))
                .map(|l| l.tp)
                .collect();
            result.per_region_ap.insert(region.to_string(), average_precision(&labels, n));
        }
        if !result.per_region_ap.is_empty() {
            let sum: f64 = result.per_region_ap.values().sum();
            result.macro_ap = Some(sum / result.per_region_ap.len() as f64);
        }
    }
    Ok(result)
}

/// Formats an AP table: one column per result (named `ap<iou×100>`), one row
/// per region, then `overall` and, when available, `macro`.
pub fn ap_table_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("region");
    for r in results {
        out.push_str(&format!(",ap{}", (r.iou_thresh * 100.0).round() as i64));
    }
    out.push('\n');
    let regions: BTreeSet<&String> = results.iter().flat_map(|r| r.per_region_ap.keys()).collect();
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for region in regions {
        out.push_str(region);
        for r in results {
            out.push(',');
            out.push_str(&fmt(r.per_region_ap.get(region).copied()));
        }
        out.push('\n');
    }
    out.push_str("overall");
    for r in results {
        out.push(',');
        out.push_str(&fmt(Some(r.overall_ap)));
    }
    out.push('\n');
    if results.iter().any(|r| r.macro_ap.is_some()) {
        out.push_str("macro");
        for r in results {
            out.push(',');
            out.push_str(&fmt(r.macro_ap));
        }
        out.push('\n');
    }
    out
}

/// `iou,recall,precision` rows for each result's pooled curve.
pub fn pr_curve_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("iou,recall,precision\n");
    for r in results {
        for (rec, prec) in &r.pr_curve {
            out.push_str(&format!("{:.2},{rec:.6},{prec:.6}\n", r.iou_thresh));
        }
    }
    out
}
