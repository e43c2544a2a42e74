//! Ray-cast synthetic scenes with exact per-point ground truth.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::{save_cloud, LabeledCloud, LidarPoint, PointCloud, PointLabel};
use crate::config::{parse_value, ConfigError, KeyValues};
use crate::depth::{depth_mm, write_raster, DepthImageSpec, DepthLabelImage, BACKGROUND};
use crate::detections::{write_detections, BBox, ClassId, Detection, DetectionSet};
use crate::geometry::{format_rig, load_rig, project_pinhole, transform_point, CameraRig, GeometryError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("object {index} has degenerate geometry: {reason}")]
    DegenerateGeometry { index: usize, reason: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rig(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact error: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Axis-aligned box; `size` is the full extent along x, y, z.
    Box,
    /// Vertical elliptic cylinder; `size` is (diameter x, diameter y, height).
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class: ClassId,
    pub shape: Shape,
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    /// Meters per second, used when generating frame sequences.
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub objects: Vec<SceneObject>,
    /// Height of the ground plane in the lidar frame, if any.
    pub ground_z: Option<f64>,
    /// Number of rays that get a spurious background return.
    pub scatter_count: usize,
    pub scatter_range: (f64, f64),
    /// Radius of a vertical wall around the sensor that catches every ray
    /// not hitting anything else.
    pub enclosure_radius: Option<f64>,
    pub max_range: f64,
    pub azimuth_steps: usize,
    pub rig: CameraRig,
    pub seed: u64,
    pub frame_id: u64,
    pub timestamp: f64,
    pub frame_period: f64,
    pub raster: DepthImageSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            objects: Vec::new(),
            ground_z: None,
            scatter_count: 0,
            scatter_range: (20.0, 25.0),
            enclosure_radius: None,
            max_range: 80.0,
            azimuth_steps: 1024,
            rig: CameraRig::reference(),
            seed: 0,
            frame_id: 0,
            timestamp: 0.0,
            frame_period: 0.1,
            raster: DepthImageSpec::default(),
        }
    }
}

impl SceneConfig {
    /// Reads the `key = value` scene dialect. A relative `rig` path is
    /// resolved against `base_dir`; without `rig` the reference rig is used.
    ///
    /// ```text
    /// seed = 7
    /// ground_z = -1.8
    /// scatter_count = 300
    /// object = car box 8 0 -0.9 4.2 1.8 1.6
    /// object = person cylinder 6 4 -0.9 0.6 0.6 1.8 0 -1 0
    /// ```
    pub fn from_key_values(kv: &KeyValues, base_dir: &Path) -> Result<Self, SceneError> {
        let mut cfg = SceneConfig::default();
        for e in &kv.entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "seed" => cfg.seed = parse_value(k, v)?,
                "frame_id" => cfg.frame_id = parse_value(k, v)?,
                "timestamp" => cfg.timestamp = parse_value(k, v)?,
                "frame_period" => cfg.frame_period = parse_value(k, v)?,
                "ground_z" => cfg.ground_z = if v == "none" { None } else { Some(parse_value(k, v)?) },
                "scatter_count" => cfg.scatter_count = parse_value(k, v)?,
                "scatter_min_range" => cfg.scatter_range.0 = parse_value(k, v)?,
                "scatter_max_range" => cfg.scatter_range.1 = parse_value(k, v)?,
                "enclosure_radius" => cfg.enclosure_radius = if v == "none" { None } else { Some(parse_value(k, v)?) },
                "max_range" => cfg.max_range = parse_value(k, v)?,
                "azimuth_steps" => cfg.azimuth_steps = parse_value(k, v)?,
                "rig" => cfg.rig = load_rig(base_dir.join(v))?,
                "object" => cfg.objects.push(parse_object(v).map_err(|reason| ConfigError::InvalidValue {
                    key: "object".into(),
                    value: v.into(),
                    reason,
                })?),
                other => return Err(ConfigError::UnknownKey(other.into()).into()),
            }
        }
        Ok(cfg)
    }

    /// Scene advanced by `index` frame periods.
    pub fn frame(&self, index: u64) -> SceneConfig {
        let dt = index as f64 * self.frame_period;
        let mut next = self.clone();
        next.frame_id = self.frame_id + index;
        next.timestamp = self.timestamp + dt;
        next.seed = self.seed.wrapping_add(index.wrapping_mul(0x9E37_79B9));
        for o in &mut next.objects {
            o.center += o.velocity * dt;
        }
        next
    }

    fn validate(&self) -> Result<(), SceneError> {
        for (index, o) in self.objects.iter().enumerate() {
            let finite = o.center.iter().chain(o.size.iter()).all(|v| v.is_finite());
            if !finite || o.size.iter().any(|&s| s <= 0.0) {
                return Err(SceneError::DegenerateGeometry { index, reason: format!("size {:?} must be positive", o.size.as_slice()) });
            }
        }
        let (lo, hi) = self.scatter_range;
        if self.scatter_count > 0 && !(lo > 0.0 && lo <= hi) {
            return Err(SceneError::Invalid(format!("scatter range [{lo}, {hi}] must satisfy 0 < min <= max")));
        }
        if self.azimuth_steps == 0 || !(self.max_range > 0.0) {
            return Err(SceneError::Invalid("azimuth_steps and max_range must be positive".into()));
        }
        if self.enclosure_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(SceneError::Invalid("enclosure_radius must be positive".into()));
        }
        Ok(())
    }
}

fn parse_object(v: &str) -> Result<SceneObject, String> {
    let tokens: Vec<&str> = v.split_whitespace().collect();
    if tokens.len() != 8 && tokens.len() != 11 {
        return Err("expected `<class> <box|cylinder> cx cy cz sx sy sz [vx vy vz]`".into());
    }
    let class = ClassId::parse(tokens[0]).map_err(|e| e.to_string())?;
    let shape = match tokens[1] {
        "box" => Shape::Box,
        "cylinder" => Shape::Cylinder,
        other => return Err(format!("unknown shape `{other}`")),
    };
    let nums = tokens[2..]
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| format!("invalid number `{t}`")))
        .collect::<Result<Vec<_>, _>>()?;
    let velocity = if nums.len() == 9 { Vector3::new(nums[6], nums[7], nums[8]) } else { Vector3::zeros() };
    Ok(SceneObject {
        class,
        shape,
        center: Vector3::new(nums[0], nums[1], nums[2]),
        size: Vector3::new(nums[3], nums[4], nums[5]),
        velocity,
    })
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitSource {
    Object(usize),
    Ground,
    Enclosure,
    Scatter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub cloud: PointCloud,
    pub detections: DetectionSet,
    pub gt_labels: Vec<Option<ClassId>>,
    pub gt_raster: DepthLabelImage,
    /// `(ring, azimuth step)` of the ray that produced each point.
    pub rays: Vec<(usize, usize)>,
    /// Exact ray parameter of each hit, meters.
    pub ranges: Vec<f64>,
    pub sources: Vec<HitSource>,
}

impl GroundTruthBundle {
    /// Cloud labeled with ground-truth classes; `detection_index` is the object index.
    pub fn gt_labeled_cloud(&self, object_count: usize) -> LabeledCloud {
        let labels = self
            .sources
            .iter()
            .zip(&self.gt_labels)
            .map(|(s, c)| match (s, c) {
                (HitSource::Object(i), Some(class)) => Some(PointLabel { class: *class, detection_index: *i as u32 }),
                _ => None,
            })
            .collect();
        LabeledCloud { cloud: self.cloud.clone(), labels, detection_count: object_count }
    }

    /// Indices of points that belong to object `index`.
    pub fn object_points(&self, index: usize) -> Vec<usize> {
        (0..self.sources.len()).filter(|&i| self.sources[i] == HitSource::Object(index)).collect()
    }
}

/// Unit direction of ring `ring` (row center elevation) and azimuth step `step`.
pub fn ray_direction(spec: &DepthImageSpec, azimuth_steps: usize, ring: usize, step: usize) -> Vector3<f64> {
    let elev = spec.row_center_deg(ring).to_radians();
    let az = ((step as f64 + 0.5) * 360.0 / azimuth_steps as f64).to_radians();
    Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin())
}

fn intersect_box(dir: &Vector3<f64>, center: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        let (lo, hi) = (center[a] - half[a], center[a] + half[a]);
        if dir[a].abs() < 1e-15 {
            if !(lo..=hi).contains(&0.0) {
                return None;
            }
            continue;
        }
        let (t0, t1) = (lo / dir[a], hi / dir[a]);
        t_near = t_near.max(t0.min(t1));
        t_far = t_far.min(t0.max(t1));
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

fn intersect_cylinder(dir: &Vector3<f64>, center: &Vector3<f64>, size: &Vector3<f64>) -> Option<f64> {
    let (a, b) = (size.x / 2.0, size.y / 2.0);
    let (z_lo, z_hi) = (center.z - size.z / 2.0, center.z + size.z / 2.0);
    let inside_ellipse = |t: f64| {
        let (x, y) = ((dir.x * t - center.x) / a, (dir.y * t - center.y) / b);
        x * x + y * y <= 1.0
    };
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // Side wall: ((dx t - cx)/a)^2 + ((dy t - cy)/b)^2 = 1
    let (dx, dy) = (dir.x / a, dir.y / b);
    let (ox, oy) = (-center.x / a, -center.y / b);
    let qa = dx * dx + dy * dy;
    if qa > 1e-15 {
        let qb = 2.0 * (dx * ox + dy * oy);
        let qc = ox * ox + oy * oy - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                let z = dir.z * t;
                if z >= z_lo && z <= z_hi {
                    consider(t);
                }
            }
        }
    }
    if dir.z.abs() > 1e-15 {
        for zc in [z_lo, z_hi] {
            let t = zc / dir.z;
            if inside_ellipse(t) {
                consider(t);
            }
        }
    }
    // Rays starting inside the solid are not meaningful returns.
    if inside_ellipse(0.0) && (z_lo..=z_hi).contains(&0.0) {
        return None;
    }
    best
}

fn intersect_object(dir: &Vector3<f64>, o: &SceneObject) -> Option<f64> {
    match o.shape {
        Shape::Box => intersect_box(dir, &o.center, &(o.size / 2.0)),
        Shape::Cylinder => intersect_cylinder(dir, &o.center, &o.size),
    }
}

fn offer(best: &mut Option<(f64, HitSource)>, t: f64, source: HitSource, max_range: f64) {
    if t > 0.0 && t <= max_range && best.is_none_or(|(bt, _)| t < bt) {
        *best = Some((t, source));
    }
}

/// Casts one ray per (ring, azimuth step) and derives perfect detections
/// and the ground-truth raster.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruthBundle, SceneError> {
    cfg.validate()?;
    let spec = &cfg.raster;
    let rings = spec.rows;
    let steps = cfg.azimuth_steps;
    let total = rings * steps;

    // Nearest genuine hit per ray.
    let mut hits: Vec<Option<(f64, HitSource)>> = (0..total)
        .map(|ray| {
            let dir = ray_direction(spec, steps, ray / steps, ray % steps);
            let mut best: Option<(f64, HitSource)> = None;
            let max = cfg.max_range;
            for (i, o) in cfg.objects.iter().enumerate() {
                if let Some(t) = intersect_object(&dir, o) {
                    offer(&mut best, t, HitSource::Object(i), max);
                }
            }
            if let Some(gz) = cfg.ground_z {
                if dir.z * gz > 0.0 {
                    offer(&mut best, gz / dir.z, HitSource::Ground, max);
                }
            }
            if best.is_none() {
                if let Some(r) = cfg.enclosure_radius {
                    let horiz = dir.x.hypot(dir.y);
                    if horiz > 1e-12 {
                        offer(&mut best, r / horiz, HitSource::Enclosure, max);
                    }
                }
            }
            best
        })
        .collect();

    if cfg.scatter_count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let count = cfg.scatter_count.min(total);
        let mut chosen: Vec<usize> = sample(&mut rng, total, count).into_vec();
        chosen.sort_unstable();
        for ray in chosen {
            let t = rng.random_range(cfg.scatter_range.0..=cfg.scatter_range.1);
            if hits[ray].is_none_or(|(bt, _)| t < bt) {
                hits[ray] = Some((t, HitSource::Scatter));
            }
        }
    }

    let mut points = Vec::new();
    let mut gt_labels = Vec::new();
    let mut rays = Vec::new();
    let mut ranges = Vec::new();
    let mut sources = Vec::new();
    for (ray, hit) in hits.iter().enumerate() {
        let Some((t, source)) = *hit else { continue };
        let (ring, step) = (ray / steps, ray % steps);
        let p = ray_direction(spec, steps, ring, step) * t;
        let (class, intensity) = match source {
            HitSource::Object(i) => (Some(cfg.objects[i].class), 0.8),
            HitSource::Ground => (None, 0.2),
            HitSource::Enclosure => (None, 0.3),
            HitSource::Scatter => (None, 0.05),
        };
        points.push(LidarPoint::new(p.x as f32, p.y as f32, p.z as f32, intensity));
        gt_labels.push(class);
        rays.push((ring, step));
        ranges.push(t);
        sources.push(source);
    }

    let cloud = PointCloud::new(cfg.frame_id, cfg.timestamp, points);
    let detections = perfect_detections(cfg, &cloud, &sources);
    let gt_raster = analytic_raster(spec, steps, &cloud, &rays, &gt_labels);
    Ok(GroundTruthBundle { cloud, detections, gt_labels, gt_raster, rays, ranges, sources })
}

/// Tight pixel-aligned boxes around each object's projected points, per
/// camera in rig order.
fn perfect_detections(cfg: &SceneConfig, cloud: &PointCloud, sources: &[HitSource]) -> DetectionSet {
    let mut out = Vec::new();
    for cam in cfg.rig.cameras() {
        let intr = &cam.intrinsics;
        let mut extent: Vec<Option<(Vector2<f64>, Vector2<f64>)>> = vec![None; cfg.objects.len()];
        for (p, s) in cloud.points.iter().zip(sources) {
            let HitSource::Object(i) = *s else { continue };
            let Ok(px) = project_pinhole(intr, transform_point(&cam.extrinsics, p.position())) else { continue };
            if !intr.contains(px) {
                continue;
            }
            extent[i] = Some(match extent[i] {
                None => (px, px),
                Some((lo, hi)) => (lo.inf(&px), hi.sup(&px)),
            });
        }
        for (i, e) in extent.iter().enumerate() {
            let Some((lo, hi)) = e else { continue };
            let bbox = BBox::new(lo.x.floor(), lo.y.floor(), hi.x.floor() + 1.0, hi.y.floor() + 1.0)
                .expect("floor(max) + 1 exceeds floor(min)");
            out.push(Detection { frame_id: cfg.frame_id, camera_id: cam.id, class: cfg.objects[i].class, score: 1.0, bbox });
        }
    }
    DetectionSet::new(out)
}

/// Raster built from ray indices rather than from re-binning the points.
fn analytic_raster(
    spec: &DepthImageSpec,
    steps: usize,
    cloud: &PointCloud,
    rays: &[(usize, usize)],
    gt_labels: &[Option<ClassId>],
) -> DepthLabelImage {
    let mut img = DepthLabelImage::empty(spec.rows, spec.cols);
    for ((p, &(ring, step)), label) in cloud.points.iter().zip(rays).zip(gt_labels) {
        // Column of the ray's center azimuth (step + 0.5) / steps.
        let col = ((2 * step + 1) * spec.cols) / (2 * steps);
        let i = img.index(ring, col);
        let d = depth_mm(p.position(), spec);
        if img.depth[i] == 0 || d < img.depth[i] {
            img.depth[i] = d;
            img.label[i] = label.map_or(BACKGROUND, |c| c.index() as i16);
        }
    }
    img
}

/// Writes a synthetic dataset of `frames` consecutive frames:
/// `manifest.csv`, `image_manifest.csv`, `clouds/`, `detections.csv`,
/// `rig.txt` and ground truth rasters under `gt/depth` and `gt/labels`.
///
/// Camera frames are stamped `image_offset` seconds after their cloud.
pub fn write_dataset(cfg: &SceneConfig, frames: u64, image_offset: f64, root: &Path) -> Result<Vec<GroundTruthBundle>, SceneError> {
    std::fs::create_dir_all(root.join("clouds"))?;
    std::fs::create_dir_all(root.join("gt/depth"))?;
    std::fs::create_dir_all(root.join("gt/labels"))?;
    std::fs::write(root.join("rig.txt"), format_rig(&cfg.rig))?;

    let mut manifest = String::from("frame_id,timestamp,cloud_file\n");
    let mut images = String::from("frame_id,timestamp\n");
    let mut all_dets = Vec::new();
    let mut bundles = Vec::new();
    for i in 0..frames {
        let frame_cfg = cfg.frame(i);
        let bundle = generate_scene(&frame_cfg)?;
        let id = frame_cfg.frame_id;
        let name = format!("{id:06}");
        save_cloud(root.join("clouds").join(format!("{name}.fpc")), &bundle.cloud.points)
            .map_err(|e| SceneError::Artifact(e.to_string()))?;
        write_raster(
            &bundle.gt_raster,
            root.join("gt/depth").join(format!("{name}.png")),
            root.join("gt/labels").join(format!("{name}.png")),
        )
        .map_err(|e| SceneError::Artifact(e.to_string()))?;
        manifest.push_str(&format!("{id},{},clouds/{name}.fpc\n", frame_cfg.timestamp));
        images.push_str(&format!("{id},{}\n", frame_cfg.timestamp + image_offset));
        all_dets.extend(bundle.detections.iter().copied());
        bundles.push(bundle);
    }
    std::fs::write(root.join("manifest.csv"), manifest)?;
    std::fs::write(root.join("image_manifest.csv"), images)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(root.join("detections.csv"))?);
    write_detections(&mut f, &DetectionSet::new(all_dets)).map_err(|e| SceneError::Artifact(e.to_string()))?;
    f.flush()?;
    Ok(bundles)
}
