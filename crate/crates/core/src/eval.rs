//! Pixelwise scoring of label rasters and per-frame timing statistics.

use std::fmt::Write as _;
use std::io::Write;
use std::ops::AddAssign;

use thiserror::Error;

use std::time::Instant;

use crate::cloud::PointCloud;
use crate::depth::{DepthLabelImage, BACKGROUND};
use crate::detections::{class_name, ClassId, Detection, DetectionError};
use crate::geometry::CameraRig;
use crate::pipeline::{process_frame, FrameConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: prediction {pred_rows}x{pred_cols}, ground truth {gt_rows}x{gt_cols}")]
    DimensionMismatch { pred_rows: usize, pred_cols: usize, gt_rows: usize, gt_cols: usize },
    #[error("label {0} is neither background nor a class id")]
    InvalidLabel(i16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Confusion tallies pooled over any number of raster pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Indexed by class id.
    pub per_class: Vec<ClassCounts>,
    pub correct_pixels: u64,
    pub total_pixels: u64,
    pub frames: u64,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        ConfusionCounts { per_class: vec![ClassCounts::default(); ClassId::COUNT], correct_pixels: 0, total_pixels: 0, frames: 0 }
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, rhs: &ConfusionCounts) {
        for (a, b) in self.per_class.iter_mut().zip(&rhs.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.correct_pixels += rhs.correct_pixels;
        self.total_pixels += rhs.total_pixels;
        self.frames += rhs.frames;
    }
}

impl ConfusionCounts {
    pub fn totals(&self) -> ClassCounts {
        self.per_class.iter().fold(ClassCounts::default(), |acc, c| ClassCounts {
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
        })
    }
}

fn class_slot(label: i16) -> Result<Option<usize>, EvalError> {
    match label {
        BACKGROUND => Ok(None),
        0..=79 => Ok(Some(label as usize)),
        other => Err(EvalError::InvalidLabel(other)),
    }
}

/// Pixelwise comparison of the label channels. Background counts toward
/// accuracy but never toward precision or recall.
pub fn compare(pred: &DepthLabelImage, gt: &DepthLabelImage) -> Result<ConfusionCounts, EvalError> {
    if (pred.rows, pred.cols) != (gt.rows, gt.cols) || pred.label.len() != gt.label.len() {
        return Err(EvalError::DimensionMismatch { pred_rows: pred.rows, pred_cols: pred.cols, gt_rows: gt.rows, gt_cols: gt.cols });
    }
    let mut counts = ConfusionCounts { frames: 1, ..Default::default() };
    for (&p, &g) in pred.label.iter().zip(&gt.label) {
        counts.total_pixels += 1;
        let (ps, gs) = (class_slot(p)?, class_slot(g)?);
        if p == g {
            counts.correct_pixels += 1;
            if let Some(c) = ps {
                counts.per_class[c].tp += 1;
            }
            continue;
        }
        if let Some(c) = ps {
            counts.per_class[c].fp += 1;
        }
        if let Some(c) = gs {
            counts.per_class[c].fn_ += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Micro-averaged over object classes.
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
    pub frames_evaluated: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let t = counts.totals();
        EvalReport {
            accuracy: ratio(counts.correct_pixels, counts.total_pixels),
            precision: ratio(t.tp, t.tp + t.fp),
            recall: ratio(t.tp, t.tp + t.fn_),
            frames_evaluated: counts.frames,
            counts,
        }
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let t = self.counts.totals();
        let mut s = String::new();
        let _ = writeln!(s, "frames_evaluated={}", self.frames_evaluated);
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "correct_pixels={}", self.counts.correct_pixels);
        let _ = writeln!(s, "total_pixels={}", self.counts.total_pixels);
        let _ = writeln!(s, "tp={}", t.tp);
        let _ = writeln!(s, "fp={}", t.fp);
        let _ = writeln!(s, "fn={}", t.fn_);
        s
    }

    /// Per-class CSV; classes with all-zero counts are omitted.
    pub fn write_class_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "class_id,class_name,tp,fp,fn,precision,recall")?;
        for c in ClassId::all() {
            let k = self.counts.per_class[c.index() as usize];
            if k == ClassCounts::default() {
                continue;
            }
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6}",
                c,
                class_name(c),
                k.tp,
                k.fp,
                k.fn_,
                ratio(k.tp, k.tp + k.fp),
                ratio(k.tp, k.tp + k.fn_)
            )?;
        }
        Ok(())
    }
}

/// Micro-averages a sequence of per-frame counts.
pub fn accumulate<'a>(reports: impl IntoIterator<Item = &'a ConfusionCounts>) -> EvalReport {
    let mut total = ConfusionCounts::default();
    for r in reports {
        total += r;
    }
    EvalReport::from_counts(total)
}

/// Wall-clock seconds per processed frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingReport {
    /// `(frame_id, seconds)` in frame order.
    pub frames: Vec<(u64, f64)>,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub workers: usize,
    pub points: u64,
}

impl TimingReport {
    pub fn new(frames: Vec<(u64, f64)>, workers: usize, points: u64) -> Self {
        let mut sorted: Vec<f64> = frames.iter().map(|f| f.1).collect();
        sorted.sort_by(f64::total_cmp);
        let mean = if sorted.is_empty() { 0.0 } else { sorted.iter().sum::<f64>() / sorted.len() as f64 };
        TimingReport { mean, p50: percentile(&sorted, 0.50), p95: percentile(&sorted, 0.95), frames, workers, points }
    }

    /// Total processing seconds per million points.
    pub fn seconds_per_million_points(&self) -> f64 {
        if self.points == 0 {
            return 0.0;
        }
        self.frames.iter().map(|f| f.1).sum::<f64>() / self.points as f64 * 1e6
    }

    /// Time relative to a reference method measured in seconds per million points.
    pub fn relative_to(&self, baseline_s_per_mpts: f64) -> f64 {
        self.seconds_per_million_points() / baseline_s_per_mpts
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "frame_id,seconds")?;
        for (id, s) in &self.frames {
            writeln!(w, "{id},{s:.6}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nworkers={}\npoints={}\nmean_seconds={:.6}\np50_seconds={:.6}\np95_seconds={:.6}\nseconds_per_million_points={:.6}\n",
            self.frames.len(),
            self.workers,
            self.points,
            self.mean,
            self.p50,
            self.p95,
            self.seconds_per_million_points()
        )
    }
}

/// Nearest-rank percentile of sorted data; 0 for empty input.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Result of [`benchmark`]: timing plus the rasters each frame produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub timing: TimingReport,
    pub rasters: Vec<DepthLabelImage>,
}

/// Runs label → refine → render on each frame in turn under a pool of
/// `workers` threads and records the wall time of every frame.
pub fn benchmark(
    frames: &[(PointCloud, Vec<Detection>)],
    rig: &CameraRig,
    cfg: &FrameConfig,
    workers: usize,
) -> Result<BenchmarkRun, BenchmarkError> {
    if workers == 0 {
        return Err(BenchmarkError::NoWorkers);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let mut times = Vec::with_capacity(frames.len());
    let mut rasters = Vec::with_capacity(frames.len());
    let mut points = 0u64;
    for (cloud, dets) in frames {
        points += cloud.len() as u64;
        let cloud = cloud.clone();
        let start = Instant::now();
        let out = pool.install(|| process_frame(cloud, dets, rig, cfg))?;
        times.push((out.labeled.cloud.frame_id, start.elapsed().as_secs_f64()));
        rasters.push(out.raster);
    }
    Ok(BenchmarkRun { timing: TimingReport::new(times, workers, points), rasters })
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("worker count must be >= 1")]
    NoWorkers,
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Detections(#[from] DetectionError),
}
