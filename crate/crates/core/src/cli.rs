//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on internal failure, 2 on invalid input
//! (including unknown flags and malformed files).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::cascade::PipelineConfig;
use crate::data::{
    compute_stats, convert_lines, group_by_image, ingest_geojson, read_jsonl, split, stats_csv, write_jsonl, BoxRecord,
    SPLIT_SEED,
};
use crate::error::Error;
use crate::eval::{ap_table_csv, evaluate, pr_curve_csv};
use crate::geometry::Obb;
use crate::nms::nms_boxes;
use crate::relation::{icmm_trace, IcmmConfig, IcmmParams};
use crate::sgcm::{rasterize_pseudo_mask, write_pgm, FUSED_STRIDE};
use crate::synth::{generate, SynthParams};
use crate::tensor_io::{load_icmm_params, read_matrix_csv, write_matrix_csv};

#[derive(Debug, Parser)]
#[command(name = "obbkit", version, about = "Oriented-box detection post-processing and evaluation")]
pub struct Cli {
    /// Worker threads for per-image work (falls back to OBBKIT_THREADS).
    #[arg(long, global = true, env = "OBBKIT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rotated AP of detections against ground truth.
    Eval(EvalArgs),
    /// Per-image rotated NMS with score floor and box cap.
    Nms(NmsArgs),
    /// Dump the relation-graph trace for one set of RoIs.
    Graph(GraphArgs),
    /// Generate a synthetic ground-truth / detection pair.
    Synth(SynthArgs),
    /// Box-size and boxes-per-image histograms.
    Stats(StatsArgs),
    /// Render a pseudo-mask as a binary PGM.
    Mask(MaskArgs),
    /// Convert GeoJSON polygons into oriented ground-truth boxes.
    Ingest(IngestArgs),
    /// Split ground truth by image into train/test/val files.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75")]
    pub iou: Vec<f64>,
    #[arg(long)]
    pub per_region: bool,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the pooled precision/recall curves here.
    #[arg(long)]
    pub pr_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML or JSON pipeline config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub floor: Option<f64>,
    #[arg(long)]
    pub max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// JSONL RoIs; `score`, when present, ranks keys for NMS.
    #[arg(long)]
    pub rois: PathBuf,
    /// Headerless CSV, one row of features per RoI.
    #[arg(long)]
    pub features: PathBuf,
    /// Relation weights (`.bin` with `.json` sidecar). Identity when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stacks: Option<usize>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 20)]
    pub boxes_per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub boxes: PathBuf,
    /// Only boxes of this image (all boxes when omitted).
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, default_value_t = FUSED_STRIDE)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = SPLIT_SEED)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "3,1,1")]
    pub ratios: Vec<f64>,
}

/// A failure, tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(e) | Failure::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let input = e
            .chain()
            .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation) || c.is::<InputError>());
        if input {
            Failure::Input(e)
        } else {
            Failure::Internal(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn input_err(msg: impl Into<String>) -> Failure {
    Failure::Input(InputError(msg.into()).into())
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(input_err(format!("{}: no such file", path.display())))
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(bytes).context("writing stdout")?,
    }
    Ok(())
}

fn jsonl_bytes(records: &[BoxRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).expect("writing to memory");
    buf
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(PipelineConfig::load(p)?)
        }
        None => Ok(PipelineConfig::default()),
    }
}

/// Parses arguments and runs the selected subcommand.
pub fn run(cli: Cli) -> Result<(), Failure> {
    let threads = cli.threads.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building worker pool")?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Eval(a) => cmd_eval(&a),
        Command::Nms(a) => cmd_nms(&a),
        Command::Graph(a) => cmd_graph(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Split(a) => cmd_split(&a),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    require_file(&a.dets)?;
    require_file(&a.gt)?;
    if a.iou.is_empty() || a.iou.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(input_err(format!("IoU thresholds must lie in [0, 1], got {:?}", a.iou)));
    }
    let dets = crate::data::read_detections(&a.dets)?;
    let gts = crate::data::read_ground_truth(&a.gt)?;
    let results = a
        .iou
        .iter()
        .map(|&t| evaluate(&dets, &gts, t, a.per_region))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(p) = &a.pr_out {
        emit(Some(p), pr_curve_csv(&results).as_bytes())?;
    }
    emit(a.out.as_deref(), ap_table_csv(&results).as_bytes())
}

pub fn cmd_nms(a: &NmsArgs) -> Result<(), Failure> {
    require_file(&a.input)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.iou {
        cfg.final_nms_iou = v;
    }
    if let Some(v) = a.floor {
        cfg.score_floor = v;
    }
    if let Some(v) = a.max {
        cfg.max_boxes = v;
    }
    cfg.validate()?;
    let params = cfg.final_nms();

    let entries = convert_lines(&a.input, |r| Ok((r.clone(), r.to_detection()?)))?;
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (r, _)) in entries.iter().enumerate() {
        by_image.entry(&r.image_id).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_image.into_values().collect();
    let kept: Vec<Vec<usize>> = groups
        .par_iter()
        .map(|idx| {
            let boxes: Vec<Obb> = idx.iter().map(|&i| entries[i].1.obb).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| entries[i].1.score).collect();
            nms_boxes(&boxes, &scores, &params).into_iter().map(|k| idx[k]).collect()
        })
        .collect();
    let records: Vec<BoxRecord> = kept.into_iter().flatten().map(|i| entries[i].0.clone()).collect();
    emit(a.out.as_deref(), &jsonl_bytes(&records))
}

pub fn cmd_graph(a: &GraphArgs) -> Result<(), Failure> {
    require_file(&a.rois)?;
    require_file(&a.features)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.stacks {
        cfg.icmm_stacks = s;
    }
    if let Some(t) = a.t {
        cfg.relation_t = t;
    }
    cfg.validate()?;

    let rois = convert_lines(&a.rois, |r| Ok((r.obb()?, r.score.unwrap_or(1.0))))?;
    let text = std::fs::read_to_string(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let features = read_matrix_csv(&text, &a.features.display().to_string())?;
    if features.nrows() != rois.len() {
        return Err(input_err(format!(
            "{} RoIs but {} feature rows",
            rois.len(),
            features.nrows()
        )));
    }
    let params = match &a.weights {
        Some(w) => {
            require_file(w)?;
            load_icmm_params(w)?
        }
        None => IcmmParams::identity(features.ncols(), cfg.icmm_stacks),
    };
    let boxes: Vec<Obb> = rois.iter().map(|r| r.0).collect();
    let scores: Vec<f64> = rois.iter().map(|r| r.1).collect();
    let icmm: IcmmConfig = cfg.icmm();
    let trace = icmm_trace(&boxes, &scores, &features, &params, &icmm)?;

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dump = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<(), Failure> {
        let mut buf = Vec::new();
        f(&mut buf).context("formatting matrix")?;
        emit(Some(&a.out_dir.join(name)), &buf)
    };
    dump("S.csv", &|b| write_matrix_csv(b, &trace.graph.affinity))?;
    dump("A.csv", &|b| write_matrix_csv(b, &trace.graph.adjacency))?;
    dump("A_hat.csv", &|b| write_matrix_csv(b, &trace.graph.normalized))?;
    dump("keys.csv", &|b| {
        trace.key_indices.iter().try_for_each(|k| writeln!(b, "{k}"))
    })?;
    for (i, out) in trace.outputs.iter().enumerate() {
        dump(&format!("F_stack{}.csv", i + 1), &|b| write_matrix_csv(b, out))?;
    }
    let last = trace.outputs.last().expect("at least one stack");
    dump("F_prime.csv", &|b| write_matrix_csv(b, last))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(input_err(format!("noise must be non-negative, got {}", a.noise)));
    }
    let scene = generate(&SynthParams {
        images: a.images,
        boxes_per_image: a.boxes_per_image,
        seed: a.seed,
        noise: a.noise,
    })?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    emit(Some(&a.out_dir.join("gt.jsonl")), &jsonl_bytes(&scene.ground_truth))?;
    emit(Some(&a.out_dir.join("dets.jsonl")), &jsonl_bytes(&scene.detections))?;
    if let Some(m) = &scene.manifest {
        let json = serde_json::to_string_pretty(m).context("serialising manifest")?;
        emit(Some(&a.out_dir.join("manifest.json")), json.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_stats(a: &StatsArgs) -> Result<(), Failure> {
    require_file(&a.input)?;
    let records = group_by_image(&read_jsonl(&a.input)?)?;
    emit(a.out.as_deref(), stats_csv(&compute_stats(&records)).as_bytes())
}

pub fn cmd_mask(a: &MaskArgs) -> Result<(), Failure> {
    require_file(&a.boxes)?;
    if a.stride == 0 || a.height == 0 || a.width == 0 {
        return Err(input_err("height, width and stride must be positive"));
    }
    let boxes: Vec<Obb> = read_jsonl(&a.boxes)?
        .iter()
        .filter(|r| a.image_id.as_ref().map_or(true, |id| &r.image_id == id))
        .map(BoxRecord::obb)
        .collect::<Result<_, _>>()?;
    let mask = rasterize_pseudo_mask(&boxes, a.height, a.width, a.stride);
    let mut buf = Vec::new();
    write_pgm(&mask, &mut buf).context("encoding PGM")?;
    emit(Some(&a.out), &buf)
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<(), Failure> {
    require_file(&a.input)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = ingest_geojson(&text)?;
    for e in &report.errors {
        eprintln!("{}: {e}", a.input.display());
    }
    if report.degenerate > 0 {
        eprintln!("{}: skipped {} degenerate polygons", a.input.display(), report.degenerate);
    }
    let records: Vec<BoxRecord> = report.records.iter().flat_map(|r| r.box_records()).collect();
    emit(a.out.as_deref(), &jsonl_bytes(&records))
}

pub fn cmd_split(a: &SplitArgs) -> Result<(), Failure> {
    require_file(&a.input)?;
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| input_err(format!("expected three ratios, got {:?}", a.ratios)))?;
    let images = group_by_image(&read_jsonl(&a.input)?)?;
    let (train, test, val) = split(&images, ratios, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, part) in [("train", train), ("test", test), ("val", val)] {
        let recs: Vec<BoxRecord> = part.iter().flat_map(|r| r.box_records()).collect();
        emit(Some(&a.out_dir.join(format!("{name}.jsonl"))), &jsonl_bytes(&recs))?;
    }
    Ok(())
}

/// Entry point shared by the binary: parses `args`, runs, and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
