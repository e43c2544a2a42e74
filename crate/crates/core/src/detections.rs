//! 2D detections: data model, CSV wire format and the oversized-box filter.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geometry::CameraRig;

/// Default fraction of the image area above which a box is treated as noise.
pub const DEFAULT_OVERSIZED_RATIO: f64 = 0.25;

pub const CSV_HEADER: &str = "frame_id,camera_id,class_id,score,x_min,y_min,x_max,y_max";

const COCO_NAMES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: class id {class_id} outside [0, 79]")]
    ClassOutOfRange { line: usize, class_id: i64 },
    #[error("class id {0} outside [0, 79]")]
    InvalidClass(i64),
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): requires x_min < x_max and y_min < y_max")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("oversized ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("detection references unknown camera {0}")]
    UnknownCamera(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Index into the 80-class COCO label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(u8);

impl ClassId {
    pub const COUNT: usize = 80;

    pub fn new(index: i64) -> Result<Self, DetectionError> {
        if (0..Self::COUNT as i64).contains(&index) {
            Ok(ClassId(index as u8))
        } else {
            Err(DetectionError::InvalidClass(index))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        class_name(self)
    }

    /// Looks up a class by its COCO name or numeric index.
    pub fn parse(text: &str) -> Result<Self, DetectionError> {
        if let Ok(i) = text.parse::<i64>() {
            return Self::new(i);
        }
        let wanted = text.replace('_', " ");
        COCO_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(&wanted))
            .map(|i| ClassId(i as u8))
            .ok_or_else(|| DetectionError::Parse { line: 0, message: format!("unknown class `{text}`") })
    }

    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..Self::COUNT as u8).map(ClassId)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn class_name(c: ClassId) -> &'static str {
    COCO_NAMES[c.0 as usize]
}

/// Axis-aligned pixel box, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DetectionError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || !(x_min < x_max) || !(y_min < y_max) {
            return Err(DetectionError::InvalidBox { x_min, y_min, x_max, y_max });
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// `x_min <= u < x_max && y_min <= v < y_max`
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x_min && u < self.x_max && v >= self.y_min && v < self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame_id: u64,
    pub camera_id: u32,
    pub class: ClassId,
    pub score: f64,
    pub bbox: BBox,
}

/// Ordered list of detections, addressable by `(frame_id, camera_id)` group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>) -> Self {
        DetectionSet { detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.detections.iter()
    }

    pub fn as_slice(&self) -> &[Detection] {
        &self.detections
    }

    pub fn into_vec(self) -> Vec<Detection> {
        self.detections
    }

    /// Groups by `(frame_id, camera_id)`, preserving input order within a group.
    pub fn groups(&self) -> BTreeMap<(u64, u32), Vec<Detection>> {
        let mut out: BTreeMap<(u64, u32), Vec<Detection>> = BTreeMap::new();
        for d in &self.detections {
            out.entry((d.frame_id, d.camera_id)).or_default().push(*d);
        }
        out
    }

    /// All detections of each frame across cameras, in input order. The
    /// position inside a frame's vector is its detection index.
    pub fn by_frame(&self) -> BTreeMap<u64, Vec<Detection>> {
        let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for d in &self.detections {
            out.entry(d.frame_id).or_default().push(*d);
        }
        out
    }
}

impl FromIterator<Detection> for DetectionSet {
    fn from_iter<I: IntoIterator<Item = Detection>>(iter: I) -> Self {
        DetectionSet { detections: iter.into_iter().collect() }
    }
}

/// Parses the detections CSV. A first line starting with `frame_id` is a header.
pub fn parse_detections(reader: impl BufRead) -> Result<DetectionSet, DetectionError> {
    let mut detections = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (line_no == 1 && trimmed.starts_with("frame_id")) {
            continue;
        }
        detections.push(parse_line(trimmed, line_no)?);
    }
    Ok(DetectionSet { detections })
}

fn parse_line(line: &str, line_no: usize) -> Result<Detection, DetectionError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(DetectionError::Parse { line: line_no, message: format!("expected 8 fields, found {}", fields.len()) });
    }
    let bad = |name: &str, value: &str| DetectionError::Parse { line: line_no, message: format!("invalid {name} `{value}`") };
    let frame_id = fields[0].parse::<u64>().map_err(|_| bad("frame_id", fields[0]))?;
    let camera_id = fields[1].parse::<u32>().map_err(|_| bad("camera_id", fields[1]))?;
    let class_raw = fields[2].parse::<i64>().map_err(|_| bad("class_id", fields[2]))?;
    let class = ClassId::new(class_raw).map_err(|_| DetectionError::ClassOutOfRange { line: line_no, class_id: class_raw })?;
    let mut nums = [0.0f64; 5];
    for (slot, (name, raw)) in nums.iter_mut().zip(["score", "x_min", "y_min", "x_max", "y_max"].into_iter().zip(&fields[3..])) {
        *slot = raw.parse::<f64>().map_err(|_| bad(name, raw))?;
    }
    let score = nums[0];
    if !(0.0..=1.0).contains(&score) {
        return Err(DetectionError::Parse { line: line_no, message: format!("score {score} outside [0, 1]") });
    }
    let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4])
        .map_err(|e| DetectionError::Parse { line: line_no, message: e.to_string() })?;
    Ok(Detection { frame_id, camera_id, class, score, bbox })
}

/// Writes the detections CSV with a header line.
pub fn write_detections(mut writer: impl Write, set: &DetectionSet) -> Result<(), DetectionError> {
    writeln!(writer, "{CSV_HEADER}")?;
    for d in &set.detections {
        let b = &d.bbox;
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{}",
            d.frame_id, d.camera_id, d.class, d.score, b.x_min, b.y_min, b.x_max, b.y_max
        )?;
    }
    Ok(())
}

/// Drops every detection whose box area exceeds `ratio * width * height` of
/// its camera. Boxes exactly at the threshold are kept.
pub fn filter_oversized(set: &DetectionSet, rig: &CameraRig, ratio: f64) -> Result<DetectionSet, DetectionError> {
    filter_detections(&set.detections, rig, ratio).map(DetectionSet::new)
}

pub(crate) fn filter_detections(dets: &[Detection], rig: &CameraRig, ratio: f64) -> Result<Vec<Detection>, DetectionError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DetectionError::InvalidRatio(ratio));
    }
    let mut kept = Vec::with_capacity(dets.len());
    for d in dets {
        let cam = rig.camera(d.camera_id).ok_or(DetectionError::UnknownCamera(d.camera_id))?;
        if d.bbox.area() <= ratio * cam.intrinsics.area() {
            kept.push(*d);
        }
    }
    Ok(kept)
}
