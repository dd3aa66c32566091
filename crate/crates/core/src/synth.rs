//! Seeded synthetic scenes: non-overlapping ground-truth boxes per image and
//! detections made by jittering them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::BoxRecord;
use crate::error::Result;
use crate::geometry::{rotated_iou, Obb};

/// Side of every synthetic image, in pixels.
pub const SYNTH_IMAGE_SIZE: f64 = 800.0;
/// Scenes with at most this many ground-truth boxes get a match manifest.
pub const MANIFEST_MAX_BOXES: usize = 100;
/// Number of region labels assigned round-robin to images.
pub const SYNTH_REGIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub images: usize,
    pub boxes_per_image: usize,
    pub seed: u64,
    /// Relative std-dev of centre and extent jitter; absolute (radians) for angle.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    /// For each detection of this image (file order), the index of the GT
    /// of this image it matches, if any.
    pub matches: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub iou_threshold: f64,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub ground_truth: Vec<BoxRecord>,
    pub detections: Vec<BoxRecord>,
    pub manifest: Option<Manifest>,
}

pub fn image_id(i: usize) -> String {
    format!("img_{i:05}")
}

pub fn region_id(i: usize) -> String {
    format!("region_{}", i % SYNTH_REGIONS)
}

/// Places `k` boxes in separate cells of a square grid so that no two
/// overlap (each box fits inside the inscribed circle of its cell).
fn scene_boxes(rng: &mut ChaCha8Rng, k: usize) -> Vec<Obb> {
    if k == 0 {
        return Vec::new();
    }
    let cols = (k as f64).sqrt().ceil() as usize;
    let cell = SYNTH_IMAGE_SIZE / cols as f64;
    (0..k)
        .map(|j| {
            let (r, c) = (j / cols, j % cols);
            let w = cell * rng.gen_range(0.25..0.5);
            let h = cell * rng.gen_range(0.25..0.5);
            let theta = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            let slack = (cell / 2.0 - 0.5 * w.hypot(h)).max(0.0);
            let cx = (c as f64 + 0.5) * cell + rng.gen_range(-1.0..=1.0) * slack * 0.5;
            let cy = (r as f64 + 0.5) * cell + rng.gen_range(-1.0..=1.0) * slack * 0.5;
            Obb::new(cx, cy, w, h, theta).expect("positive extents")
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, b: &Obb, sigma: f64) -> Result<Obb> {
    let mut n = || -> f64 { rng.sample(StandardNormal) };
    let (dx, dy, sw, sh, dt) = (n(), n(), n(), n(), n());
    Obb::new(
        b.cx + sigma * dx * b.w,
        b.cy + sigma * dy * b.h,
        b.w * (sigma * sw).exp(),
        b.h * (sigma * sh).exp(),
        b.theta + sigma * dt,
    )
}

/// Exhaustive greedy matcher used for manifests: builds the full IoU table
/// first, then walks detections by descending score.
fn brute_force_matches(dets: &[(Obb, f64)], gts: &[Obb], iou_threshold: f64) -> Vec<Option<usize>> {
    let table: Vec<Vec<f64>> = dets.iter().map(|(d, _)| gts.iter().map(|g| rotated_iou(d, g)).collect()).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in order {
        let mut best: Option<usize> = None;
        for g in 0..gts.len() {
            if taken[g] || table[d][g] < iou_threshold {
                continue;
            }
            if best.map_or(true, |b| table[d][g] > table[d][b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// Generates a scene. Every random draw comes from one generator seeded by
/// `params.seed`, so output depends only on `params`.
pub fn generate(params: &SynthParams) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ground_truth = Vec::new();
    let mut detections = Vec::new();
    let with_manifest = params.images * params.boxes_per_image <= MANIFEST_MAX_BOXES;
    let mut manifest_images = Vec::new();
    for i in 0..params.images {
        let (img, region) = (image_id(i), region_id(i));
        let gts = scene_boxes(&mut rng, params.boxes_per_image);
        let mut dets = Vec::with_capacity(gts.len());
        for g in &gts {
            let d = jitter(&mut rng, g, params.noise)?;
            let score: f64 = rng.gen_range(0.5..1.0);
            dets.push((d, score));
        }
        ground_truth.extend(gts.iter().map(|g| BoxRecord::from_obb(g, &img, &region, None)));
        detections.extend(dets.iter().map(|(d, s)| BoxRecord::from_obb(d, &img, &region, Some(*s))));
        if with_manifest {
            manifest_images.push(ManifestImage {
                image_id: img,
                matches: brute_force_matches(&dets, &gts, 0.5),
            });
        }
    }
    Ok(SynthScene {
        ground_truth,
        detections,
        manifest: with_manifest.then_some(Manifest {
            iou_threshold: 0.5,
            images: manifest_images,
        }),
    })
}
