//! Point clouds, per-point labels and their binary file formats (`FPC1`, `FPL1`).

use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::detections::ClassId;

const CLOUD_MAGIC: &[u8; 4] = b"FPC1";
const LABEL_MAGIC: &[u8; 4] = b"FPL1";

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("truncated file: expected {expected} records, data ended early")]
    Truncated { expected: u32 },
    #[error("trailing bytes after {count} records")]
    Trailing { count: u32 },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("label {index}: {message}")]
    InvalidLabel { index: usize, message: String },
    #[error("label count {labels} does not match point count {points}")]
    CountMismatch { labels: usize, points: usize },
}

/// One lidar return in the lidar frame (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl LidarPoint {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        LidarPoint { x, y, z, intensity }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub frame_id: u64,
    pub timestamp: f64,
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(frame_id: u64, timestamp: f64, points: Vec<LidarPoint>) -> Self {
        PointCloud { frame_id, timestamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Label carried by a point assigned to a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointLabel {
    pub class: ClassId,
    pub detection_index: u32,
}

/// A cloud together with one optional label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<Option<PointLabel>>,
    /// Size of the frame's detection list that `detection_index` refers to.
    pub detection_count: usize,
}

impl LabeledCloud {
    pub fn unlabeled(cloud: PointCloud, detection_count: usize) -> Self {
        let labels = vec![None; cloud.len()];
        LabeledCloud { cloud, labels, detection_count }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

pub fn write_cloud(mut w: impl Write, points: &[LidarPoint]) -> Result<(), CloudError> {
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&(points.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cloud(mut r: impl Read) -> Result<Vec<LidarPoint>, CloudError> {
    let count = read_header(&mut r, CLOUD_MAGIC, "FPC1")?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let need = count as usize * 16;
    if data.len() < need {
        return Err(CloudError::Truncated { expected: count });
    }
    if data.len() > need {
        return Err(CloudError::Trailing { count });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    data.chunks_exact(16)
        .enumerate()
        .map(|(index, c)| {
            let p = LidarPoint::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16]));
            if p.x.is_finite() && p.y.is_finite() && p.z.is_finite() {
                Ok(p)
            } else {
                Err(CloudError::NonFinite { index })
            }
        })
        .collect()
}

pub fn write_labels(mut w: impl Write, labels: &[Option<PointLabel>]) -> Result<(), CloudError> {
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(labels.len() * 6);
    for l in labels {
        let (class, det) = match l {
            Some(l) => (l.class.index() as i16, l.detection_index as i32),
            None => (-1i16, -1i32),
        };
        buf.extend_from_slice(&class.to_le_bytes());
        buf.extend_from_slice(&det.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_labels(mut r: impl Read) -> Result<Vec<Option<PointLabel>>, CloudError> {
    let count = read_header(&mut r, LABEL_MAGIC, "FPL1")?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let need = count as usize * 6;
    if data.len() < need {
        return Err(CloudError::Truncated { expected: count });
    }
    if data.len() > need {
        return Err(CloudError::Trailing { count });
    }
    data.chunks_exact(6)
        .enumerate()
        .map(|(index, c)| {
            let class = i16::from_le_bytes([c[0], c[1]]);
            let det = i32::from_le_bytes([c[2], c[3], c[4], c[5]]);
            match (class, det) {
                (-1, -1) => Ok(None),
                (c, d) if c >= 0 && d >= 0 => {
                    let class = ClassId::new(c as i64)
                        .map_err(|e| CloudError::InvalidLabel { index, message: e.to_string() })?;
                    Ok(Some(PointLabel { class, detection_index: d as u32 }))
                }
                (c, d) => Err(CloudError::InvalidLabel {
                    index,
                    message: format!("class {c} and detection {d} must both be -1 or both be >= 0"),
                }),
            }
        })
        .collect()
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], name: &'static str) -> Result<u32, CloudError> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    let found = [head[0], head[1], head[2], head[3]];
    if &found != magic {
        return Err(CloudError::BadMagic { expected: name, found });
    }
    Ok(u32::from_le_bytes([head[4], head[5], head[6], head[7]]))
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<Vec<LidarPoint>, CloudError> {
    read_cloud(io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_cloud(path: impl AsRef<Path>, points: &[LidarPoint]) -> Result<(), CloudError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_cloud(&mut w, points)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<Option<PointLabel>>, CloudError> {
    read_labels(io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[Option<PointLabel>]) -> Result<(), CloudError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_labels(&mut w, labels)?;
    w.flush()?;
    Ok(())
}
