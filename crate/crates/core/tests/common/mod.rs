//! Brute-force reference implementations and scene builders shared by the
//! integration tests. Everything here is written from the definitions, not
//! from the library code paths.
#![allow(dead_code)]

use std::path::Path;

use frustum_core::cloud::{LabeledCloud, LidarPoint, PointCloud, PointLabel};
use frustum_core::depth::DepthImageSpec;
use frustum_core::detections::{BBox, ClassId, Detection};
use frustum_core::geometry::CameraRig;
use frustum_core::synth::{SceneConfig, SceneObject, Shape};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Label of one point by exhaustive search over cameras and boxes.
pub fn oracle_label(p: [f64; 3], rig: &CameraRig, dets: &[Detection]) -> Option<(u8, u32)> {
    for cam in rig.cameras() {
        let r = &cam.extrinsics.rotation;
        let t = &cam.extrinsics.translation;
        let mut c = [0.0; 3];
        for (row, out) in c.iter_mut().enumerate() {
            *out = r[(row, 0)] * p[0] + r[(row, 1)] * p[1] + r[(row, 2)] * p[2] + t[row];
        }
        if c[2] <= 0.0 {
            continue;
        }
        let i = &cam.intrinsics;
        let u = i.fx * c[0] / c[2] + i.cx;
        let v = i.fy * c[1] / c[2] + i.cy;
        if !(u >= 0.0 && u < i.width as f64 && v >= 0.0 && v < i.height as f64) {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (idx, d) in dets.iter().enumerate() {
            let b = &d.bbox;
            if d.camera_id != cam.id || !(b.x_min <= u && u < b.x_max && b.y_min <= v && v < b.y_max) {
                continue;
            }
            let area = (b.x_max - b.x_min) * (b.y_max - b.y_min);
            if best.is_none_or(|(a, _)| area < a) {
                best = Some((area, idx));
            }
        }
        return best.map(|(_, idx)| (dets[idx].class.index(), idx as u32));
    }
    None
}

pub fn as_pairs(labels: &[Option<PointLabel>]) -> Vec<Option<(u8, u32)>> {
    labels.iter().map(|l| l.map(|l| (l.class.index(), l.detection_index))).collect()
}

/// Random cloud and detections in the 5-camera reference rig. Box corners
/// are whole pixels so equal-area ties happen.
pub fn random_frustum_scene(seed: u64, points: usize, boxes: usize) -> (PointCloud, Vec<Detection>) {
    let mut r = rng(seed);
    let pts = (0..points)
        .map(|_| {
            let range = r.random_range(1.0..30.0f32);
            let az = r.random_range(0.0..std::f32::consts::TAU);
            let z = r.random_range(-4.0..3.0f32);
            LidarPoint::new(range * az.cos(), range * az.sin(), z, 0.5)
        })
        .collect();
    let rig = CameraRig::reference();
    let dets = (0..boxes)
        .map(|_| {
            let cam = &rig.cameras()[r.random_range(0..rig.cameras().len())];
            let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
            let x0 = r.random_range(0..(w as u32 - 40)) as f64;
            let y0 = r.random_range(0..(h as u32 - 40)) as f64;
            let bw = r.random_range(20..400) as f64;
            let bh = r.random_range(20..300) as f64;
            Detection {
                frame_id: seed,
                camera_id: cam.id,
                class: ClassId::new(r.random_range(0..80)).unwrap(),
                score: r.random_range(0.3..1.0),
                bbox: BBox::new(x0, y0, (x0 + bw).min(w), (y0 + bh).min(h)).unwrap(),
            }
        })
        .collect();
    (PointCloud::new(seed, 0.0, pts), dets)
}

/// Per-bin nearest point by scanning every point for every occupied bin.
/// Returns `(depth_mm, label)` rasters in row-major order.
pub fn oracle_render(lc: &LabeledCloud, spec: &DepthImageSpec) -> (Vec<u16>, Vec<i16>) {
    let (rows, cols) = (spec.rows, spec.cols);
    let bin = |p: &LidarPoint| -> Option<usize> {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let horiz = x.hypot(y);
        let elev = z.atan2(horiz).to_degrees();
        if elev <= spec.elev_min_deg || elev > spec.elev_max_deg {
            return None;
        }
        let mut az = y.atan2(x).to_degrees();
        if az < 0.0 {
            az += 360.0;
        }
        let col = ((az / 360.0 * cols as f64) as usize).min(cols - 1);
        let h = (spec.elev_max_deg - spec.elev_min_deg) / rows as f64;
        let row = (((spec.elev_max_deg - elev) / h) as usize).min(rows - 1);
        Some(row * cols + col)
    };
    let bins: Vec<Option<usize>> = lc.cloud.points.iter().map(bin).collect();
    let mut depth = vec![0u16; rows * cols];
    let mut label = vec![-1i16; rows * cols];
    for target in 0..rows * cols {
        let mut best: Option<(f64, usize)> = None;
        for (i, b) in bins.iter().enumerate() {
            if *b != Some(target) {
                continue;
            }
            let p = &lc.cloud.points[i];
            let range = ((p.x as f64).powi(2) + (p.y as f64).powi(2) + (p.z as f64).powi(2)).sqrt();
            if best.is_none_or(|(r, _)| range < r) {
                best = Some((range, i));
            }
        }
        if let Some((range, i)) = best {
            depth[target] = ((range * 1000.0).round().max(1.0)).min(spec.range_max_mm as f64) as u16;
            label[target] = lc.labels[i].map_or(-1, |l| l.class.index() as i16);
        }
    }
    (depth, label)
}

/// Minimum 2-means inertia over every split into two non-empty groups.
pub fn brute_force_two_means(points: &[Vector3<f64>]) -> f64 {
    let n = points.len();
    assert!((2..=20).contains(&n));
    let inertia = |group: &[&Vector3<f64>]| -> f64 {
        let mean = group.iter().fold(Vector3::zeros(), |acc, p| acc + **p) / group.len() as f64;
        group.iter().map(|p| (**p - mean).norm_squared()).sum()
    };
    let mut best = f64::INFINITY;
    // Point 0 is always in group A; masks enumerate the remaining points.
    for mask in 0u32..(1 << (n - 1)) {
        let mut a = vec![&points[0]];
        let mut b = Vec::new();
        for (j, p) in points.iter().enumerate().skip(1) {
            if mask & (1 << (j - 1)) != 0 {
                b.push(p);
            } else {
                a.push(p);
            }
        }
        if b.is_empty() {
            continue;
        }
        best = best.min(inertia(&a) + inertia(&b));
    }
    best
}

/// 200 points on a 2 x 1.6 m patch 8 m ahead plus 100 points at 20-25 m in
/// the same viewing cone. Object points come first.
pub fn object_plus_background(seed: u64) -> Vec<Vector3<f64>> {
    let mut r = rng(seed);
    let mut pts = Vec::with_capacity(300);
    for _ in 0..200 {
        pts.push(Vector3::new(8.0 + r.random_range(-0.2..0.2), r.random_range(-1.0..1.0), r.random_range(-0.8..0.8)));
    }
    for _ in 0..100 {
        let dir = Vector3::new(8.0, r.random_range(-1.0..1.0), r.random_range(-0.8..0.8)).normalize();
        pts.push(dir * r.random_range(20.0..25.0));
    }
    pts
}

/// Best 2-partition that splits the points by range. For this scene the
/// optimal partition is a range threshold, so this is an exhaustive search
/// over the relevant candidates. Returns (inertia, size of the near group).
pub fn best_range_split(points: &[Vector3<f64>]) -> (f64, usize) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].norm().total_cmp(&points[b].norm()));
    let sse = |idx: &[usize]| {
        let mean = idx.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i]) / idx.len() as f64;
        idx.iter().map(|&i| (points[i] - mean).norm_squared()).sum::<f64>()
    };
    (1..points.len())
        .map(|cut| (sse(&order[..cut]) + sse(&order[cut..]), cut))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
}

fn object(class: u8, shape: Shape, c: [f64; 3], s: [f64; 3]) -> SceneObject {
    SceneObject {
        class: ClassId::new(class as i64).unwrap(),
        shape,
        center: Vector3::from(c),
        size: Vector3::from(s),
        velocity: Vector3::zeros(),
    }
}

/// Ten objects around the sensor, each inside a single camera's view, plus
/// ground, far scatter and an enclosing wall so all 32 x 1452 rays return.
pub fn dense_street_scene(seed: u64) -> SceneConfig {
    let objects = vec![
        object(2, Shape::Box, [8.0, 0.0, -0.9], [4.2, 1.8, 1.6]),
        object(2, Shape::Box, [12.0, 3.0, -0.9], [4.2, 1.8, 1.6]),
        object(0, Shape::Cylinder, [5.0, -2.0, -0.9], [0.6, 0.6, 1.8]),
        object(7, Shape::Box, [3.0, 12.0, -0.3], [7.0, 2.5, 3.0]),
        object(2, Shape::Box, [-8.0, 4.0, -0.9], [4.2, 1.8, 1.6]),
        object(0, Shape::Cylinder, [-4.0, -6.0, -0.9], [0.6, 0.6, 1.8]),
        object(5, Shape::Box, [-14.0, -4.0, 0.0], [11.0, 2.6, 3.6]),
        object(2, Shape::Box, [2.0, -10.0, -0.9], [1.8, 4.2, 1.6]),
        object(1, Shape::Box, [6.0, -7.0, -1.1], [1.8, 0.6, 1.4]),
        object(7, Shape::Box, [18.0, -4.0, -0.3], [7.0, 2.5, 3.0]),
    ];
    SceneConfig {
        objects,
        ground_z: Some(-1.8),
        scatter_count: 1000,
        enclosure_radius: Some(40.0),
        azimuth_steps: 1452,
        seed,
        ..Default::default()
    }
}

/// A moderately busy scene with objects in several cameras.
pub fn street_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        objects: vec![
            SceneObject { velocity: Vector3::new(2.0, 0.0, 0.0), ..object(2, Shape::Box, [8.0, 0.0, -0.9], [4.2, 1.8, 1.6]) },
            object(0, Shape::Cylinder, [4.0, 5.0, -0.9], [0.6, 0.6, 1.8]),
            object(7, Shape::Box, [-3.0, -9.0, -0.3], [7.0, 2.5, 3.0]),
        ],
        ground_z: Some(-1.8),
        scatter_count: 400,
        seed,
        ..Default::default()
    }
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if !skip.contains(&rel.as_str()) {
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
