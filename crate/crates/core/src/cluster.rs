//! Seeded Lloyd k-means and per-frustum noise removal.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::LabeledCloud;
use crate::detections::ClassId;
use crate::frustum::extract_frustum;

pub const STATS_HEADER: &str = "frame_id,detection_index,class_id,points_before,points_after,drop_rate";

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k-means needs at least k = {k} points, got {count}")]
    TooFewPoints { count: usize, k: usize },
    #[error("invalid k-means config: {0}")]
    InvalidConfig(String),
}

/// Which cluster of a frustum survives refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// Centroid closest to the lidar origin.
    #[default]
    Nearest,
    /// Most members.
    Largest,
    /// Smallest mean member-to-centroid distance.
    Densest,
}

impl FromStr for Selection {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Selection::Nearest),
            "largest" => Ok(Selection::Largest),
            "densest" => Ok(Selection::Densest),
            other => Err(ClusterError::InvalidConfig(format!("unknown selection `{other}`"))),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Nearest => "nearest",
            Selection::Largest => "largest",
            Selection::Densest => "densest",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid motion, meters.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
    pub selection: Selection,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { k: 3, max_iter: 100, tol: 1e-4, seed: 0, restarts: 5, selection: Selection::Nearest }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 {
            return Err(ClusterError::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_iter == 0 {
            return Err(ClusterError::InvalidConfig("max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(ClusterError::InvalidConfig("tol must be > 0".into()));
        }
        if self.restarts == 0 {
            return Err(ClusterError::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vector3<f64>>,
    /// Sum of squared point-to-centroid distances, m^2.
    pub inertia: f64,
    pub iterations_used: usize,
    /// Inertia after each assignment step of the winning run; the last entry
    /// equals `inertia`.
    pub inertia_history: Vec<f64>,
}

impl ClusterResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Best-of-`restarts` Lloyd k-means with uniform random distinct-point seeding.
pub fn kmeans(points: &[Vector3<f64>], cfg: &KMeansConfig) -> Result<ClusterResult, ClusterError> {
    cfg.validate()?;
    if points.len() < cfg.k || points.is_empty() {
        return Err(ClusterError::TooFewPoints { count: points.len(), k: cfg.k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<ClusterResult> = None;
    for _ in 0..cfg.restarts {
        let init: Vec<Vector3<f64>> = sample(&mut rng, points.len(), cfg.k).iter().map(|i| points[i]).collect();
        let run = lloyd(points, init, cfg.max_iter, cfg.tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(points: &[Vector3<f64>], mut centroids: Vec<Vector3<f64>>, max_iter: usize, tol: f64) -> ClusterResult {
    let k = centroids.len();
    let mut assignments = assign(points, &centroids);
    let mut history = Vec::new();
    let mut iterations_used = 0;
    for it in 1..=max_iter {
        history.push(cost(points, &centroids, &assignments));
        let updated = update_centroids(points, &centroids, &assignments);
        let motion = centroids.iter().zip(&updated).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        centroids = updated;
        let next = assign(points, &centroids);
        let changed = next != assignments;
        assignments = next;
        iterations_used = it;
        if motion < tol || !changed {
            break;
        }
    }
    // Re-center non-empty clusters on their final members.
    let (sums, counts) = member_sums(points, &assignments, k);
    for j in 0..k {
        if counts[j] > 0 {
            centroids[j] = sums[j] / counts[j] as f64;
        }
    }
    let inertia = cost(points, &centroids, &assignments);
    history.push(inertia);
    ClusterResult { assignments, centroids, inertia, iterations_used, inertia_history: history }
}

fn assign(points: &[Vector3<f64>], centroids: &[Vector3<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn cost(points: &[Vector3<f64>], centroids: &[Vector3<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| (p - centroids[a]).norm_squared()).sum()
}

fn member_sums(points: &[Vector3<f64>], assignments: &[usize], k: usize) -> (Vec<Vector3<f64>>, Vec<usize>) {
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sums[a] += p;
        counts[a] += 1;
    }
    (sums, counts)
}

/// Means of each cluster; an empty cluster is reseeded at the point farthest
/// from its currently assigned centroid.
fn update_centroids(points: &[Vector3<f64>], old: &[Vector3<f64>], assignments: &[usize]) -> Vec<Vector3<f64>> {
    let k = old.len();
    let (sums, counts) = member_sums(points, assignments, k);
    let mut out: Vec<Vector3<f64>> =
        (0..k).map(|j| if counts[j] > 0 { sums[j] / counts[j] as f64 } else { old[j] }).collect();
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let dist = |i: usize| (points[i] - old[assignments[i]]).norm_squared();
        order.sort_by(|&a, &b| dist(b).total_cmp(&dist(a)).then(a.cmp(&b)));
        for (j, &i) in empty.iter().zip(&order) {
            out[*j] = points[i];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementStats {
    pub points_before: usize,
    pub points_after: usize,
    pub drop_rate: f64,
}

impl RefinementStats {
    pub fn new(points_before: usize, points_after: usize) -> Self {
        let drop_rate = if points_before > 0 { 1.0 - points_after as f64 / points_before as f64 } else { 0.0 };
        RefinementStats { points_before, points_after, drop_rate }
    }

    /// Sums counts of several frustums into one record.
    pub fn combine<'a>(items: impl IntoIterator<Item = &'a RefinementStats>) -> Self {
        let (before, after) = items.into_iter().fold((0, 0), |(b, a), s| (b + s.points_before, a + s.points_after));
        RefinementStats::new(before, after)
    }
}

/// Clusters one frustum and keeps the cluster picked by `cfg.selection`.
///
/// Frustums with fewer than `2k` points are kept whole. Returned indices are
/// positions into `points`, ascending.
pub fn refine_frustum(points: &[Vector3<f64>], cfg: &KMeansConfig) -> (Vec<usize>, RefinementStats) {
    let n = points.len();
    let keep_all = || ((0..n).collect::<Vec<_>>(), RefinementStats::new(n, n));
    if cfg.validate().is_err() || n < cfg.k || n < 2 * cfg.k {
        return keep_all();
    }
    let Ok(result) = kmeans(points, cfg) else {
        return keep_all();
    };
    let chosen = select_cluster(points, &result, cfg.selection);
    let kept: Vec<usize> = (0..n).filter(|&i| result.assignments[i] == chosen).collect();
    let stats = RefinementStats::new(n, kept.len());
    (kept, stats)
}

fn select_cluster(points: &[Vector3<f64>], result: &ClusterResult, selection: Selection) -> usize {
    let sizes = result.cluster_sizes();
    let mut spread = vec![0.0; sizes.len()];
    for (p, &a) in points.iter().zip(&result.assignments) {
        spread[a] += (p - result.centroids[a]).norm();
    }
    let candidates = (0..sizes.len()).filter(|&j| sizes[j] > 0);
    // Keys are minimized; strict comparison keeps the lower index on ties.
    let key = |j: usize| -> f64 {
        match selection {
            Selection::Nearest => result.centroids[j].norm(),
            Selection::Largest => -(sizes[j] as f64),
            Selection::Densest => spread[j] / sizes[j] as f64,
        }
    };
    let mut best = None;
    for j in candidates {
        let kj = key(j);
        if best.is_none_or(|(_, kb)| kj < kb) {
            best = Some((j, kj));
        }
    }
    best.map(|(j, _)| j).unwrap_or(0)
}

/// K-means settings for a whole frame, with optional per-class `k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineConfig {
    pub kmeans: KMeansConfig,
    pub per_class_k: BTreeMap<u8, usize>,
}

impl RefineConfig {
    pub fn for_frustum(&self, class: ClassId, frame_id: u64, detection_index: usize) -> KMeansConfig {
        KMeansConfig {
            k: self.per_class_k.get(&class.index()).copied().unwrap_or(self.kmeans.k),
            seed: derive_seed(self.kmeans.seed, frame_id, detection_index as u64),
            ..self.kmeans
        }
    }
}

/// Mixes the base seed with the frustum identity so each frustum owns an
/// independent RNG stream regardless of scheduling.
pub fn derive_seed(seed: u64, frame_id: u64, detection_index: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ frame_id);
    splitmix(h ^ detection_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumStats {
    pub frame_id: u64,
    pub detection_index: usize,
    pub class: ClassId,
    pub stats: RefinementStats,
}

/// Refines every non-empty frustum of a labeled frame; removed points lose
/// their label. Returns one stats record per frustum that had points.
pub fn refine_labels(lc: &LabeledCloud, cfg: &RefineConfig) -> (LabeledCloud, Vec<FrustumStats>) {
    let frame_id = lc.cloud.frame_id;
    let results: Vec<(Vec<usize>, Vec<usize>, FrustumStats)> = (0..lc.detection_count)
        .into_par_iter()
        .filter_map(|det| {
            let members = extract_frustum(lc, det).expect("index within detection_count");
            let class = lc.labels[*members.first()?]?.class;
            let pts: Vec<Vector3<f64>> = members.iter().map(|&i| lc.cloud.points[i].position()).collect();
            let (kept, stats) = refine_frustum(&pts, &cfg.for_frustum(class, frame_id, det));
            Some((members, kept, FrustumStats { frame_id, detection_index: det, class, stats }))
        })
        .collect();

    let mut out = lc.clone();
    let mut stats = Vec::with_capacity(results.len());
    for (members, kept, s) in results {
        let mut keep = kept.into_iter().peekable();
        for (pos, &point) in members.iter().enumerate() {
            if keep.peek() == Some(&pos) {
                keep.next();
            } else {
                out.labels[point] = None;
            }
        }
        stats.push(s);
    }
    (out, stats)
}

pub fn write_refinement_stats(mut w: impl Write, stats: &[FrustumStats]) -> std::io::Result<()> {
    writeln!(w, "{STATS_HEADER}")?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{},{:.6}",
            s.frame_id, s.detection_index, s.class, s.stats.points_before, s.stats.points_after, s.stats.drop_rate
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropRateSummary {
    /// Drop rate pooled over all points (weighted by `points_before`).
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub series: Vec<f64>,
}

/// Summarizes per-frame drop rates. `min`/`max` skip frames with no points.
pub fn aggregate_drop_rate(stats: &[RefinementStats]) -> DropRateSummary {
    let pooled = RefinementStats::combine(stats);
    let populated = stats.iter().filter(|s| s.points_before > 0).map(|s| s.drop_rate);
    let (min, max) = populated.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    DropRateSummary { mean: pooled.drop_rate, min, max, series: stats.iter().map(|s| s.drop_rate).collect() }
}
