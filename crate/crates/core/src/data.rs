//! Dataset plumbing: polygon ingestion, deterministic splits, statistics,
//! and the JSONL box format shared by detections and ground truth.
//!
//! JSONL layout, one object per line:
//!
//! ```text
//! {"image_id": "...", "region_id": "...", "cx": .., "cy": .., "w": .., "h": .., "theta": .., "score": ..}
//! ```
//!
//! `theta` is in radians. Records with a `score` are detections, records
//! without are ground truth. Unknown fields are carried through untouched.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::GroundTruthBox;
use crate::geometry::{min_area_rect, Obb, Point};
use crate::nms::ScoredDetection;

/// Default seed for dataset splits.
pub const SPLIT_SEED: u64 = 42;
/// Train/test/val proportions.
pub const SPLIT_RATIOS: [f64; 3] = [3.0, 1.0, 1.0];
/// Width in pixels of each √area histogram bucket.
pub const SQRT_AREA_BUCKET: f64 = 8.0;
/// Upper edge of the √area histogram; larger boxes land in an overflow bucket.
pub const SQRT_AREA_MAX: f64 = 256.0;
/// Width of each boxes-per-image histogram bucket.
pub const BOXES_PER_IMAGE_BUCKET: usize = 10;
/// Upper edge of the boxes-per-image histogram.
pub const BOXES_PER_IMAGE_MAX: usize = 300;

/// One line of a detection or ground-truth JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: String,
    #[serde(default)]
    pub region_id: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl BoxRecord {
    pub fn from_obb(obb: &Obb, image_id: &str, region_id: &str, score: Option<f64>) -> Self {
        Self {
            image_id: image_id.to_owned(),
            region_id: region_id.to_owned(),
            cx: obb.cx,
            cy: obb.cy,
            w: obb.w,
            h: obb.h,
            theta: obb.theta,
            score,
            extra: Map::new(),
        }
    }

    pub fn obb(&self) -> Result<Obb> {
        Obb::new(self.cx, self.cy, self.w, self.h, self.theta)
    }

    pub fn is_detection(&self) -> bool {
        self.score.is_some()
    }

    pub fn to_detection(&self) -> Result<ScoredDetection> {
        let score = self
            .score
            .ok_or_else(|| Error::Validation(format!("record on image {} has no score", self.image_id)))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!("score {score} outside [0, 1]")));
        }
        Ok(ScoredDetection::new(self.obb()?, score, &self.image_id).with_region(&self.region_id))
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruthBox> {
        Ok(GroundTruthBox {
            obb: self.obb()?,
            image_id: self.image_id.clone(),
            region_id: self.region_id.clone(),
        })
    }
}

/// Parses JSONL from a reader; `name` labels errors. Blank lines are
/// skipped. Each record comes back with its 1-based line number.
pub fn read_jsonl_numbered(reader: impl BufRead, name: &str) -> Result<Vec<(usize, BoxRecord)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn read_jsonl_from(reader: impl BufRead, name: &str) -> Result<Vec<BoxRecord>> {
    Ok(read_jsonl_numbered(reader, name)?.into_iter().map(|(_, r)| r).collect())
}

fn open_numbered(path: &Path) -> Result<Vec<(usize, BoxRecord)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl_numbered(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<BoxRecord>> {
    Ok(open_numbered(path.as_ref())?.into_iter().map(|(_, r)| r).collect())
}

pub fn write_jsonl(mut out: impl Write, records: &[BoxRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL file of detections (every line needs a score).
pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<ScoredDetection>> {
    convert_lines(path.as_ref(), BoxRecord::to_detection)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthBox>> {
    convert_lines(path.as_ref(), BoxRecord::to_ground_truth)
}

/// Converts each record of a JSONL file, tagging failures with file and line.
pub fn convert_lines<T>(path: &Path, f: impl Fn(&BoxRecord) -> Result<T>) -> Result<Vec<T>> {
    let name = path.display().to_string();
    open_numbered(path)?
        .iter()
        .map(|(line, rec)| {
            f(rec).map_err(|e| Error::Parse {
                path: name.clone(),
                line: *line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One image's annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub region_id: String,
    pub image_w: f64,
    pub image_h: f64,
    pub annotations: Vec<Obb>,
}

impl DatasetRecord {
    /// Ground-truth JSONL lines for this image.
    pub fn box_records(&self) -> Vec<BoxRecord> {
        self.annotations
            .iter()
            .map(|b| BoxRecord::from_obb(b, &self.image_id, &self.region_id, None))
            .collect()
    }
}

/// Groups box records by image, keeping first-appearance order. Image sizes
/// are unknown in this format and left at zero.
pub fn group_by_image(records: &[BoxRecord]) -> Result<Vec<DatasetRecord>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<DatasetRecord> = Vec::new();
    for r in records {
        let slot = *index.entry(&r.image_id).or_insert_with(|| {
            out.push(DatasetRecord {
                image_id: r.image_id.clone(),
                region_id: r.region_id.clone(),
                image_w: 0.0,
                image_h: 0.0,
                annotations: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].annotations.push(r.obb()?);
    }
    Ok(out)
}

/// Outcome of polygon ingestion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<DatasetRecord>,
    /// Polygons skipped because they were collinear or too small.
    pub degenerate: usize,
    /// Per-feature problems; the feature is skipped and ingestion continues.
    pub errors: Vec<String>,
    /// Boxes reaching outside their image by more than the margin.
    pub out_of_bounds: usize,
}

/// Slack, in pixels, before a box counts as outside its image.
const BOUNDS_MARGIN: f64 = 2.0;

/// Converts a GeoJSON `FeatureCollection` of pixel-space `Polygon`s into
/// per-image records of minimum-area rectangles. Only the outer ring is
/// used. Each feature needs an `image_id` property; `region_id`, `image_w`
/// and `image_h` are optional.
pub fn ingest_geojson(text: &str) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    if text.trim().is_empty() {
        return Ok(report);
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: "<geojson>".into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Validation("expected a FeatureCollection with a features array".into()))?;

    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, feat) in features.iter().enumerate() {
        let parsed = match parse_feature(feat) {
            Ok(p) => p,
            Err(msg) => {
                report.errors.push(format!("feature {i}: {msg}"));
                continue;
            }
        };
        let obb = match min_area_rect(&parsed.ring) {
            Ok(b) if b.area() > crate::geometry::AREA_EPS => b,
            _ => {
                log::warn!("feature {i}: degenerate polygon skipped");
                report.degenerate += 1;
                continue;
            }
        };
        let slot = *index.entry(parsed.image_id.clone()).or_insert_with(|| {
            report.records.push(DatasetRecord {
                image_id: parsed.image_id.clone(),
                region_id: parsed.region_id.clone(),
                image_w: parsed.image_w,
                image_h: parsed.image_h,
                annotations: Vec::new(),
            });
            report.records.len() - 1
        });
        let rec = &mut report.records[slot];
        if rec.image_w > 0.0 && rec.image_h > 0.0 && !within_image(&obb, rec.image_w, rec.image_h) {
            log::warn!("feature {i}: box extends outside image {}", rec.image_id);
            report.out_of_bounds += 1;
        }
        rec.annotations.push(obb);
    }
    Ok(report)
}

fn within_image(b: &Obb, w: f64, h: f64) -> bool {
    b.corner_points().iter().all(|p| {
        p.x >= -BOUNDS_MARGIN && p.y >= -BOUNDS_MARGIN && p.x <= w + BOUNDS_MARGIN && p.y <= h + BOUNDS_MARGIN
    })
}

struct ParsedFeature {
    image_id: String,
    region_id: String,
    image_w: f64,
    image_h: f64,
    ring: Vec<Point>,
}

fn parse_feature(feat: &Value) -> std::result::Result<ParsedFeature, String> {
    let props = feat.get("properties").and_then(Value::as_object);
    let prop_str = |k: &str| {
        props.and_then(|p| p.get(k)).and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        })
    };
    let prop_num = |k: &str| props.and_then(|p| p.get(k)).and_then(Value::as_f64).unwrap_or(0.0);
    let image_id = prop_str("image_id").filter(|s| !s.is_empty()).ok_or("missing image_id property")?;
    let geom = feat.get("geometry").ok_or("missing geometry")?;
    match geom.get("type").and_then(Value::as_str) {
        Some("Polygon") => {}
        Some(other) => return Err(format!("unsupported geometry type {other}")),
        None => return Err("geometry has no type".into()),
    }
    let outer = geom
        .get("coordinates")
        .and_then(Value::as_array)
        .and_then(|rings| rings.first())
        .and_then(Value::as_array)
        .ok_or("polygon has no outer ring")?;
    let mut ring = Vec::with_capacity(outer.len());
    for (j, pos) in outer.iter().enumerate() {
        let xy = pos
            .as_array()
            .filter(|a| a.len() >= 2)
            .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
            .ok_or_else(|| format!("vertex {j} is not a coordinate pair"))?;
        ring.push(Point::from(xy));
    }
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(format!("outer ring has {} distinct vertices", ring.len()));
    }
    Ok(ParsedFeature {
        image_id,
        region_id: prop_str("region_id").unwrap_or_default(),
        image_w: prop_num("image_w"),
        image_h: prop_num("image_h"),
        ring,
    })
}

/// Partition sizes for `n` items by largest-remainder apportionment.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Validation(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let exact = ratios.map(|r| n as f64 * r / total);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    Ok(sizes)
}

/// Shuffles with a seeded generator and cuts into train/test/val.
pub fn split<T: Clone>(records: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [a, b, _] = split_sizes(records.len(), ratios)?;
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = shuffled.split_off(a + b);
    let test = shuffled.split_off(a);
    Ok((shuffled, test, val))
}

/// Histograms of box size and boxes per image. The last bucket of each
/// histogram collects everything at or above its upper edge.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetStats {
    pub sqrt_area_histogram: Vec<u64>,
    pub boxes_per_image_histogram: Vec<u64>,
    pub total_images: u64,
    pub total_instances: u64,
}

pub fn compute_stats(records: &[DatasetRecord]) -> DatasetStats {
    let area_buckets = (SQRT_AREA_MAX / SQRT_AREA_BUCKET) as usize;
    let count_buckets = BOXES_PER_IMAGE_MAX / BOXES_PER_IMAGE_BUCKET;
    let mut stats = DatasetStats {
        sqrt_area_histogram: vec![0; area_buckets + 1],
        boxes_per_image_histogram: vec![0; count_buckets + 1],
        ..Default::default()
    };
    for r in records {
        stats.total_images += 1;
        let n = r.annotations.len();
        stats.boxes_per_image_histogram[(n / BOXES_PER_IMAGE_BUCKET).min(count_buckets)] += 1;
        for b in &r.annotations {
            stats.total_instances += 1;
            let side = (b.w * b.h).sqrt();
            let bucket = ((side / SQRT_AREA_BUCKET).floor() as usize).min(area_buckets);
            stats.sqrt_area_histogram[bucket] += 1;
        }
    }
    stats
}

/// `histogram,lo,hi,count` rows for the non-empty buckets. An empty `hi`
/// marks an overflow bucket.
pub fn stats_csv(stats: &DatasetStats) -> String {
    let mut out = String::from("histogram,lo,hi,count\n");
    let last = stats.sqrt_area_histogram.len().saturating_sub(1);
    for (i, &n) in stats.sqrt_area_histogram.iter().enumerate().filter(|(_, &n)| n > 0) {
        let lo = i as f64 * SQRT_AREA_BUCKET;
        let hi = if i == last { String::new() } else { format!("{}", lo + SQRT_AREA_BUCKET) };
        out.push_str(&format!("sqrt_area,{lo},{hi},{n}\n"));
    }
    let last = stats.boxes_per_image_histogram.len().saturating_sub(1);
    for (i, &n) in stats.boxes_per_image_histogram.iter().enumerate().filter(|(_, &n)| n > 0) {
        let lo = i * BOXES_PER_IMAGE_BUCKET;
        let hi = if i == last { String::new() } else { format!("{}", lo + BOXES_PER_IMAGE_BUCKET) };
        out.push_str(&format!("boxes_per_image,{lo},{hi},{n}\n"));
    }
    out
}
