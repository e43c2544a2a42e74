//! Dataset ingestion, frame association and batch orchestration.
//!
//! A dataset root holds `manifest.csv` (`frame_id,timestamp,cloud_file`),
//! the referenced `FPC1` clouds and a detections CSV. An optional
//! `image_manifest.csv` (`frame_id,timestamp`) stamps each detection frame;
//! without it detections pair with the cloud of the same `frame_id`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, error, info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{load_cloud, save_labels, CloudError, LabeledCloud, PointCloud};
use crate::cluster::{
    aggregate_drop_rate, refine_labels, write_refinement_stats, DropRateSummary, FrustumStats, RefineConfig,
    RefinementStats, Selection,
};
use crate::config::{parse_bool, parse_value, ConfigError, KeyValues};
use crate::depth::{read_label_raster, render, write_raster, DepthImageSpec, DepthLabelImage, RasterError};
use crate::detections::{filter_detections, parse_detections, ClassId, Detection, DetectionError, DetectionSet, DEFAULT_OVERSIZED_RATIO};
use crate::eval::{accumulate, compare, EvalError, EvalReport, TimingReport};
use crate::frustum::label_points;
use crate::geometry::{load_rig, CameraRig, GeometryError};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGE_MANIFEST_FILE: &str = "image_manifest.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("rig: {0}")]
    Rig(#[from] GeometryError),
    #[error("detections: {0}")]
    Detections(#[from] DetectionError),
    #[error("{file} line {line}: {message}")]
    Manifest { file: PathBuf, line: usize, message: String },
    #[error("cloud: {0}")]
    Cloud(#[from] CloudError),
    #[error("raster: {0}")]
    Raster(#[from] RasterError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("unmatched raster files: {}", .0.join(", "))]
    MissingPairs(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Per-frame processing settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub oversized_ratio: f64,
    pub clustering: bool,
    pub refine: RefineConfig,
    pub raster: DepthImageSpec,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            oversized_ratio: DEFAULT_OVERSIZED_RATIO,
            clustering: true,
            refine: RefineConfig::default(),
            raster: DepthImageSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub rig: PathBuf,
    pub dataset: PathBuf,
    pub detections: PathBuf,
    pub output: PathBuf,
    pub workers: usize,
    pub max_skew: f64,
    pub frame: FrameConfig,
}

impl PipelineConfig {
    /// Defaults for a dataset root: rig and detections are read from
    /// `rig.txt` and `detections.csv` inside it.
    pub fn for_dataset(dataset: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        let dataset = dataset.into();
        PipelineConfig {
            rig: dataset.join("rig.txt"),
            detections: dataset.join("detections.csv"),
            dataset,
            output: output.into(),
            workers: 5,
            max_skew: 0.05,
            frame: FrameConfig::default(),
        }
    }

    /// Builds a config from `key = value` entries. Relative paths resolve
    /// against `base_dir`. `kmeans.k.<class>` sets `k` for one class, by
    /// name or numeric id.
    pub fn from_key_values(kv: &KeyValues, base_dir: &Path) -> Result<Self, ConfigError> {
        let get = |key: &str| kv.entries.iter().rev().find(|e| e.key == key).map(|e| e.value.as_str());
        let path = |v: &str| base_dir.join(v);
        let dataset = path(get("dataset").ok_or(ConfigError::Missing("dataset"))?);
        let output = path(get("output").ok_or(ConfigError::Missing("output"))?);
        let mut cfg = PipelineConfig::for_dataset(dataset, output);
        let km = &mut cfg.frame.refine.kmeans;
        for e in &kv.entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "dataset" | "output" => {}
                "rig" => cfg.rig = path(v),
                "detections" => cfg.detections = path(v),
                "workers" => cfg.workers = parse_value(k, v)?,
                "max_skew" => cfg.max_skew = parse_value(k, v)?,
                "oversized_ratio" => cfg.frame.oversized_ratio = parse_value(k, v)?,
                "clustering" => cfg.frame.clustering = parse_bool(k, v)?,
                "kmeans.k" => km.k = parse_value(k, v)?,
                "kmeans.max_iter" => km.max_iter = parse_value(k, v)?,
                "kmeans.tol" => km.tol = parse_value(k, v)?,
                "kmeans.seed" => km.seed = parse_value(k, v)?,
                "kmeans.restarts" => km.restarts = parse_value(k, v)?,
                "kmeans.selection" => km.selection = parse_value::<Selection>(k, v)?,
                _ => match k.strip_prefix("kmeans.k.") {
                    Some(class) => {
                        let class = ClassId::parse(class).map_err(|err| ConfigError::InvalidValue {
                            key: k.into(),
                            value: v.into(),
                            reason: err.to_string(),
                        })?;
                        cfg.frame.refine.per_class_k.insert(class.index(), parse_value(k, v)?);
                    }
                    None => return Err(ConfigError::UnknownKey(k.into())),
                },
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, value: String, reason: &str| ConfigError::InvalidValue { key: key.into(), value, reason: reason.into() };
        if self.workers == 0 {
            return Err(invalid("workers", "0".into(), "must be >= 1"));
        }
        if !(self.max_skew >= 0.0) {
            return Err(invalid("max_skew", self.max_skew.to_string(), "must be >= 0"));
        }
        if !(self.frame.oversized_ratio > 0.0 && self.frame.oversized_ratio <= 1.0) {
            return Err(invalid("oversized_ratio", self.frame.oversized_ratio.to_string(), "must be in (0, 1]"));
        }
        self.frame.refine.kmeans.validate().map_err(|e| invalid("kmeans", format!("{:?}", self.frame.refine.kmeans), &e.to_string()))?;
        if let Some((c, _)) = self.frame.refine.per_class_k.iter().find(|(_, &k)| k == 0) {
            return Err(invalid(&format!("kmeans.k.{c}"), "0".into(), "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub frame_id: u64,
    pub timestamp: f64,
    pub cloud_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub cloud_file: PathBuf,
    /// Detection frame paired with this cloud and its timestamp offset.
    pub source: Option<(u64, f64)>,
    /// Detections re-stamped with this cloud's `frame_id`.
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameIndex {
    pub frames: Vec<IndexedFrame>,
    /// Detection frames that were not associated with any cloud.
    pub unmatched_detection_frames: Vec<u64>,
}

fn parse_csv_rows(path: &Path, header: &str, fields: usize) -> Result<Vec<(usize, Vec<String>)>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with(header)) {
            continue;
        }
        let cols: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if cols.len() != fields {
            return Err(PipelineError::Manifest {
                file: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected {fields} fields, found {}", cols.len()),
            });
        }
        rows.push((idx + 1, cols));
    }
    Ok(rows)
}

fn manifest_number<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T, PipelineError> {
    raw.parse().map_err(|_| PipelineError::Manifest { file: path.to_path_buf(), line, message: format!("invalid {name} `{raw}`") })
}

/// Reads `manifest.csv`; cloud paths are relative to the dataset root.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>, PipelineError> {
    let path = root.join(MANIFEST_FILE);
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (line, cols) in parse_csv_rows(&path, "frame_id", 3)? {
        let frame_id = manifest_number(&path, line, "frame_id", &cols[0])?;
        let timestamp: f64 = manifest_number(&path, line, "timestamp", &cols[1])?;
        if !timestamp.is_finite() {
            return Err(PipelineError::Manifest { file: path, line, message: "timestamp must be finite".into() });
        }
        if out.iter().any(|e| e.frame_id == frame_id) {
            return Err(PipelineError::Manifest { file: path, line, message: format!("duplicate frame_id {frame_id}") });
        }
        out.push(ManifestEntry { frame_id, timestamp, cloud_file: root.join(&cols[2]) });
    }
    Ok(out)
}

fn read_image_manifest(root: &Path) -> Result<Option<BTreeMap<u64, f64>>, PipelineError> {
    let path = root.join(IMAGE_MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let mut out = BTreeMap::new();
    for (line, cols) in parse_csv_rows(&path, "frame_id", 2)? {
        let id = manifest_number(&path, line, "frame_id", &cols[0])?;
        let ts: f64 = manifest_number(&path, line, "timestamp", &cols[1])?;
        if !ts.is_finite() {
            return Err(PipelineError::Manifest { file: path, line, message: "timestamp must be finite".into() });
        }
        out.insert(id, ts);
    }
    Ok(Some(out))
}

/// Pairs clouds with detection frames one-to-one by nearest timestamp.
///
/// `groups` maps a detection frame id to its timestamp. Candidate pairs
/// within `max_skew` are taken greedily in order of increasing offset; ties
/// go to the earlier detection timestamp, then the earlier cloud.
pub fn associate(clouds: &[(u64, f64)], groups: &BTreeMap<u64, f64>, max_skew: f64) -> Vec<Option<(u64, f64)>> {
    let mut pairs: Vec<(f64, f64, usize, u64)> = Vec::new();
    for (ci, &(_, ct)) in clouds.iter().enumerate() {
        for (&gid, &gt) in groups {
            let dt = (gt - ct).abs();
            if dt <= max_skew + 1e-12 {
                pairs.push((dt, gt, ci, gid));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut assigned = vec![None; clouds.len()];
    let mut used = std::collections::BTreeSet::new();
    for (_, gt, ci, gid) in pairs {
        if assigned[ci].is_none() && !used.contains(&gid) {
            assigned[ci] = Some((gid, gt - clouds[ci].1));
            used.insert(gid);
        }
    }
    assigned
}

pub fn build_frame_index(root: &Path, detections: &DetectionSet, max_skew: f64) -> Result<FrameIndex, PipelineError> {
    let manifest = read_manifest(root)?;
    let mut by_frame = detections.by_frame();
    let clouds: Vec<(u64, f64)> = manifest.iter().map(|e| (e.frame_id, e.timestamp)).collect();

    let groups: BTreeMap<u64, f64> = match read_image_manifest(root)? {
        Some(stamps) => {
            for id in by_frame.keys().filter(|id| !stamps.contains_key(id)) {
                warn!("detection frame {id} has no timestamp in {IMAGE_MANIFEST_FILE}; ignored");
            }
            by_frame.keys().filter_map(|id| stamps.get(id).map(|&t| (*id, t))).collect()
        }
        None => {
            // Without image timestamps a detection frame carries the stamp
            // of the cloud sharing its id.
            let stamp: BTreeMap<u64, f64> = clouds.iter().copied().collect();
            by_frame.keys().filter_map(|id| stamp.get(id).map(|&t| (*id, t))).collect()
        }
    };

    let assigned = associate(&clouds, &groups, max_skew);
    let mut frames = Vec::with_capacity(manifest.len());
    for (entry, source) in manifest.into_iter().zip(assigned) {
        let detections = source
            .and_then(|(gid, _)| by_frame.remove(&gid))
            .unwrap_or_default()
            .into_iter()
            .map(|d| Detection { frame_id: entry.frame_id, ..d })
            .collect();
        frames.push(IndexedFrame { frame_id: entry.frame_id, timestamp: entry.timestamp, cloud_file: entry.cloud_file, source, detections });
    }
    let unmatched_detection_frames: Vec<u64> = by_frame.into_keys().collect();
    if !unmatched_detection_frames.is_empty() {
        warn!("{} detection frame(s) not associated with any cloud", unmatched_detection_frames.len());
    }
    Ok(FrameIndex { frames, unmatched_detection_frames })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub labeled: LabeledCloud,
    pub raster: DepthLabelImage,
    pub frustums: Vec<FrustumStats>,
    /// All frustums of the frame pooled; zero points when clustering is off.
    pub refinement: RefinementStats,
}

/// filter oversized boxes → label points → optional refinement → render.
pub fn process_frame(cloud: PointCloud, detections: &[Detection], rig: &CameraRig, cfg: &FrameConfig) -> Result<FrameOutput, DetectionError> {
    let kept = filter_detections(detections, rig, cfg.oversized_ratio)?;
    if kept.len() < detections.len() {
        debug!("frame {}: {} oversized detection(s) dropped", cloud.frame_id, detections.len() - kept.len());
    }
    let labeled = label_points(cloud, rig, &kept);
    let (labeled, frustums) = if cfg.clustering { refine_labels(&labeled, &cfg.refine) } else { (labeled, Vec::new()) };
    let refinement = RefinementStats::combine(frustums.iter().map(|f| &f.stats));
    let raster = render(&labeled, &cfg.raster);
    Ok(FrameOutput { labeled, raster, frustums, refinement })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub frames_total: usize,
    pub failures: Vec<(u64, String)>,
    pub frustums: Vec<FrustumStats>,
    pub drop_rate: DropRateSummary,
    pub timing: TimingReport,
}

impl RunSummary {
    pub fn frames_ok(&self) -> usize {
        self.frames_total - self.failures.len()
    }
}

pub fn frame_file_name(frame_id: u64, ext: &str) -> String {
    format!("{frame_id:06}.{ext}")
}

struct FrameRecord {
    frame_id: u64,
    seconds: f64,
    points: usize,
    result: Result<(Vec<FrustumStats>, RefinementStats), String>,
}

fn run_frame(frame: &IndexedFrame, rig: &CameraRig, cfg: &PipelineConfig) -> FrameRecord {
    let fail = |seconds: f64, e: String| FrameRecord { frame_id: frame.frame_id, seconds, points: 0, result: Err(e) };
    let points = match load_cloud(&frame.cloud_file) {
        Ok(p) => p,
        Err(e) => return fail(0.0, format!("{}: {e}", frame.cloud_file.display())),
    };
    let n = points.len();
    let cloud = PointCloud::new(frame.frame_id, frame.timestamp, points);
    let start = Instant::now();
    let out = match process_frame(cloud, &frame.detections, rig, &cfg.frame) {
        Ok(o) => o,
        Err(e) => return fail(start.elapsed().as_secs_f64(), e.to_string()),
    };
    let seconds = start.elapsed().as_secs_f64();

    let out_dir = &cfg.output;
    let write = || -> Result<(), String> {
        write_raster(
            &out.raster,
            out_dir.join("depth").join(frame_file_name(frame.frame_id, "png")),
            out_dir.join("labels").join(frame_file_name(frame.frame_id, "png")),
        )
        .map_err(|e| e.to_string())?;
        save_labels(out_dir.join("point_labels").join(frame_file_name(frame.frame_id, "fpl")), &out.labeled.labels).map_err(|e| e.to_string())
    };
    if let Err(e) = write() {
        return fail(seconds, e);
    }
    debug!("frame {}: {} points, {} labeled, {:.4} s", frame.frame_id, n, out.labeled.labeled_count(), seconds);
    FrameRecord { frame_id: frame.frame_id, seconds, points: n, result: Ok((out.frustums, out.refinement)) }
}

/// Runs every indexed frame under a pool of `cfg.workers` threads.
///
/// Per-frame failures are logged and collected in the summary; the error
/// path is reserved for configuration and dataset problems.
/// Writes `depth/`, `labels/`, `point_labels/`, `refinement_stats.csv`,
/// `drop_rate.txt` and `timing.csv` under the output root.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let rig = load_rig(&cfg.rig)?;
    let det_file = fs::File::open(&cfg.detections).map_err(io_err(&cfg.detections))?;
    let detections = parse_detections(BufReader::new(det_file))?;
    let index = build_frame_index(&cfg.dataset, &detections, cfg.max_skew)?;
    info!("{} frame(s), {} detection(s), {} worker(s)", index.frames.len(), detections.len(), cfg.workers);

    for sub in ["depth", "labels", "point_labels"] {
        let dir = cfg.output.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let records: Vec<FrameRecord> = pool.install(|| index.frames.par_iter().map(|f| run_frame(f, &rig, cfg)).collect());

    let mut summary = RunSummary { frames_total: records.len(), ..Default::default() };
    let mut per_frame = Vec::new();
    let mut timings = Vec::new();
    let mut points = 0u64;
    for r in records {
        timings.push((r.frame_id, r.seconds));
        match r.result {
            Ok((frustums, pooled)) => {
                points += r.points as u64;
                summary.frustums.extend(frustums);
                per_frame.push(pooled);
            }
            Err(e) => {
                error!("frame {} failed: {e}", r.frame_id);
                summary.failures.push((r.frame_id, e));
            }
        }
    }
    summary.drop_rate = aggregate_drop_rate(&per_frame);
    summary.timing = TimingReport::new(timings, cfg.workers, points);

    write_file(&cfg.output.join("refinement_stats.csv"), |w| write_refinement_stats(w, &summary.frustums))?;
    let drop_text = drop_rate_text(&summary.drop_rate, &per_frame);
    write_file(&cfg.output.join("drop_rate.txt"), |w| w.write_all(drop_text.as_bytes()))?;
    write_file(&cfg.output.join("timing.csv"), |w| summary.timing.write_csv(w))?;
    info!(
        "{} of {} frame(s) processed; mean drop rate {:.4}; mean {:.4} s/frame",
        summary.frames_ok(),
        summary.frames_total,
        summary.drop_rate.mean,
        summary.timing.mean
    );
    Ok(summary)
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    body(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// `key=value` drop-rate summary followed by the per-frame series.
pub fn drop_rate_text(summary: &DropRateSummary, per_frame: &[RefinementStats]) -> String {
    let pooled = RefinementStats::combine(per_frame);
    let mut s = String::new();
    let _ = writeln!(s, "frames={}", per_frame.len());
    let _ = writeln!(s, "points_before={}", pooled.points_before);
    let _ = writeln!(s, "points_after={}", pooled.points_after);
    let _ = writeln!(s, "mean={:.6}", summary.mean);
    let _ = writeln!(s, "min={:.6}", summary.min);
    let _ = writeln!(s, "max={:.6}", summary.max);
    let series: Vec<String> = summary.series.iter().map(|r| format!("{r:.6}")).collect();
    let _ = writeln!(s, "series={}", series.join(","));
    s
}

fn label_dir(root: &Path) -> PathBuf {
    let nested = root.join("labels");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>, PipelineError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Scores every label raster under `pred_root` against the same-named one
/// under `gt_root`. Either root may hold the PNGs directly or in `labels/`.
pub fn run_eval(pred_root: &Path, gt_root: &Path, spec: &DepthImageSpec) -> Result<EvalReport, PipelineError> {
    let (pred_dir, gt_dir) = (label_dir(pred_root), label_dir(gt_root));
    let (pred, gt) = (png_names(&pred_dir)?, png_names(&gt_dir)?);
    let mut missing: Vec<String> = pred.iter().filter(|n| gt.binary_search(n).is_err()).map(|n| format!("{n} (no ground truth)")).collect();
    missing.extend(gt.iter().filter(|n| pred.binary_search(n).is_err()).map(|n| format!("{n} (no prediction)")));
    if !missing.is_empty() {
        return Err(PipelineError::MissingPairs(missing));
    }
    let counts = pred
        .iter()
        .map(|name| {
            let p = read_label_raster(pred_dir.join(name), spec)?;
            let g = read_label_raster(gt_dir.join(name), spec)?;
            Ok(compare(&p, &g)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(accumulate(&counts))
}

/// Writes `eval_report.txt` and `eval_classes.csv` into `out_dir`.
pub fn write_eval_report(report: &EvalReport, out_dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_file(&out_dir.join("eval_report.txt"), |w| w.write_all(report.to_text().as_bytes()))?;
    write_file(&out_dir.join("eval_classes.csv"), |w| report.write_class_csv(w))
}
