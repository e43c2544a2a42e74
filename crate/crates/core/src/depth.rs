//! Spherical 32 x 1024 depth/label rasters and their PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::cloud::LabeledCloud;

/// Label value for bins without an object.
pub const BACKGROUND: i16 = -1;
/// Label PNG pixel value for [`BACKGROUND`].
pub const BACKGROUND_PIXEL: u8 = 255;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode error: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode error: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("malformed raster: {0}")]
    Malformed(String),
    #[error("dimension mismatch: expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    DimensionMismatch { expected_rows: usize, expected_cols: usize, rows: usize, cols: usize },
}

/// Angular layout of the range image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthImageSpec {
    pub rows: usize,
    pub cols: usize,
    pub elev_max_deg: f64,
    pub elev_min_deg: f64,
    pub range_max_mm: u16,
}

impl Default for DepthImageSpec {
    /// Spinning 32-ring lidar: rows span +10.67 to -30.67 degrees, 1024 columns
    /// over 360 degrees, 25 m range cap.
    fn default() -> Self {
        DepthImageSpec { rows: 32, cols: 1024, elev_max_deg: 10.67, elev_min_deg: -30.67, range_max_mm: 25_000 }
    }
}

impl DepthImageSpec {
    /// Vertical size of one row in degrees.
    pub fn row_height_deg(&self) -> f64 {
        (self.elev_max_deg - self.elev_min_deg) / self.rows as f64
    }

    pub fn col_width_deg(&self) -> f64 {
        360.0 / self.cols as f64
    }

    /// Elevation of the center of `row`, degrees.
    pub fn row_center_deg(&self, row: usize) -> f64 {
        self.elev_max_deg - (row as f64 + 0.5) * self.row_height_deg()
    }
}

/// Maps a lidar-frame point to its `(row, col)` bin. Azimuth 0 is +x and
/// grows counterclockwise; `None` means the point is outside the vertical
/// field of view `(elev_min, elev_max]`.
pub fn spherical_bin(p: Vector3<f64>, spec: &DepthImageSpec) -> Option<(usize, usize)> {
    let mut azimuth = p.y.atan2(p.x).to_degrees();
    if azimuth < 0.0 {
        azimuth += 360.0;
    }
    let col = ((azimuth / 360.0 * spec.cols as f64).floor() as usize).min(spec.cols - 1);
    let elevation = p.z.atan2(p.x.hypot(p.y)).to_degrees();
    if !(elevation > spec.elev_min_deg && elevation <= spec.elev_max_deg) {
        return None;
    }
    let row = (((spec.elev_max_deg - elevation) / spec.row_height_deg()).floor() as usize).min(spec.rows - 1);
    Some((row, col))
}

/// Range in millimeters as stored in the depth channel: rounded, at least
/// 1 (0 means no return), capped at `range_max_mm`.
pub fn depth_mm(p: Vector3<f64>, spec: &DepthImageSpec) -> u16 {
    let mm = (1000.0 * p.norm()).round();
    mm.clamp(1.0, spec.range_max_mm as f64) as u16
}

/// Row-major depth and label rasters of identical shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthLabelImage {
    pub rows: usize,
    pub cols: usize,
    /// Millimeters, 0 = no return.
    pub depth: Vec<u16>,
    /// Class id, [`BACKGROUND`] for no object.
    pub label: Vec<i16>,
}

impl DepthLabelImage {
    pub fn empty(rows: usize, cols: usize) -> Self {
        DepthLabelImage { rows, cols, depth: vec![0; rows * cols], label: vec![BACKGROUND; rows * cols] }
    }

    /// Label-only raster (depth 1 mm wherever a label is set); handy for
    /// evaluation fixtures.
    pub fn from_labels(rows: usize, cols: usize, label: Vec<i16>) -> Self {
        assert_eq!(label.len(), rows * cols);
        let depth = label.iter().map(|&l| u16::from(l != BACKGROUND)).collect();
        DepthLabelImage { rows, cols, depth, label }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn labeled_pixels(&self) -> usize {
        self.label.iter().filter(|&&l| l != BACKGROUND).count()
    }
}

/// Projects a labeled cloud into the range image. In each bin the nearest
/// point wins; equal depths go to the lower point index.
pub fn render(lc: &LabeledCloud, spec: &DepthImageSpec) -> DepthLabelImage {
    let mut img = DepthLabelImage::empty(spec.rows, spec.cols);
    for (point, label) in lc.cloud.points.iter().zip(&lc.labels) {
        let p = point.position();
        let Some((row, col)) = spherical_bin(p, spec) else { continue };
        let d = depth_mm(p, spec);
        let i = img.index(row, col);
        // Points arrive in index order, so strict `<` keeps the earlier one on ties.
        if img.depth[i] == 0 || d < img.depth[i] {
            img.depth[i] = d;
            img.label[i] = label.map_or(BACKGROUND, |l| l.class.index() as i16);
        }
    }
    img
}

/// Writes the depth channel as 16-bit grayscale and labels as 8-bit grayscale.
pub fn write_raster(img: &DepthLabelImage, depth_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<(), RasterError> {
    let depth_bytes: Vec<u8> = img.depth.iter().flat_map(|d| d.to_be_bytes()).collect();
    write_png(depth_path.as_ref(), img.rows, img.cols, png::BitDepth::Sixteen, &depth_bytes)?;
    let label_bytes = label_pixels(img)?;
    write_png(label_path.as_ref(), img.rows, img.cols, png::BitDepth::Eight, &label_bytes)
}

fn label_pixels(img: &DepthLabelImage) -> Result<Vec<u8>, RasterError> {
    img.label
        .iter()
        .map(|&l| match l {
            BACKGROUND => Ok(BACKGROUND_PIXEL),
            0..=79 => Ok(l as u8),
            other => Err(RasterError::Malformed(format!("label {other} is not a class id"))),
        })
        .collect()
}

fn write_png(path: &Path, rows: usize, cols: usize, depth: png::BitDepth, data: &[u8]) -> Result<(), RasterError> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// Reads a raster pair written by [`write_raster`] and checks it against
/// `spec`'s shape.
pub fn read_raster(depth_path: impl AsRef<Path>, label_path: impl AsRef<Path>, spec: &DepthImageSpec) -> Result<DepthLabelImage, RasterError> {
    let label = read_label_raster(label_path, spec)?;
    let (data, bit_depth) = read_png(depth_path.as_ref(), spec)?;
    if bit_depth != png::BitDepth::Sixteen {
        return Err(RasterError::Malformed(format!("depth png must be 16-bit, found {bit_depth:?}")));
    }
    let depth: Vec<u16> = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    if let Some(d) = depth.iter().find(|&&d| d > spec.range_max_mm) {
        return Err(RasterError::Malformed(format!("depth {d} mm exceeds {} mm", spec.range_max_mm)));
    }
    if let Some(i) = (0..depth.len()).find(|&i| label.label[i] != BACKGROUND && depth[i] == 0) {
        return Err(RasterError::Malformed(format!("pixel {i} is labeled but has no depth")));
    }
    Ok(DepthLabelImage { depth, ..label })
}

/// Reads only the label PNG; the depth channel is left at 0.
pub fn read_label_raster(label_path: impl AsRef<Path>, spec: &DepthImageSpec) -> Result<DepthLabelImage, RasterError> {
    let (data, bit_depth) = read_png(label_path.as_ref(), spec)?;
    if bit_depth != png::BitDepth::Eight {
        return Err(RasterError::Malformed(format!("label png must be 8-bit, found {bit_depth:?}")));
    }
    let label = data
        .iter()
        .map(|&v| match v {
            BACKGROUND_PIXEL => Ok(BACKGROUND),
            0..=79 => Ok(v as i16),
            other => Err(RasterError::Malformed(format!("label pixel {other} is not a class id"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DepthLabelImage { rows: spec.rows, cols: spec.cols, depth: vec![0; label.len()], label })
}

fn read_png(path: &Path, spec: &DepthImageSpec) -> Result<(Vec<u8>, png::BitDepth), RasterError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (cols, rows) = (info.width as usize, info.height as usize);
    if (rows, cols) != (spec.rows, spec.cols) {
        return Err(RasterError::DimensionMismatch { expected_rows: spec.rows, expected_cols: spec.cols, rows, cols });
    }
    if info.color_type != png::ColorType::Grayscale {
        return Err(RasterError::Malformed(format!("expected grayscale, found {:?}", info.color_type)));
    }
    let bit_depth = info.bit_depth;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Malformed("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((buf, bit_depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{LidarPoint, PointCloud, PointLabel};
    use crate::detections::ClassId;
    use proptest::prelude::*;

    fn spec() -> DepthImageSpec {
        DepthImageSpec::default()
    }

    #[test]
    fn default_geometry() {
        let s = spec();
        assert_eq!(s.rows * s.cols, 32_768);
        assert!((s.row_height_deg() - 1.291875).abs() < 1e-12);
        assert!((s.col_width_deg() - 0.3515625).abs() < 1e-12);
    }

    #[test]
    fn bin_examples() {
        let s = spec();
        // 10.67 / 1.291875 = 8.26
        assert_eq!(spherical_bin(Vector3::new(1.0, 0.0, 0.0), &s), Some((8, 0)));
        assert_eq!(spherical_bin(Vector3::new(-1.0, 0.0, 0.0), &s), Some((8, 512)));
        assert_eq!(spherical_bin(Vector3::new(1.0, 0.0, 1.0), &s), None);
        assert_eq!(spherical_bin(Vector3::new(0.0, 1.0, 0.0), &s).unwrap().1, 256);
        assert_eq!(spherical_bin(Vector3::new(0.0, -1.0, 0.0), &s).unwrap().1, 768);
        // Boundaries: top edge included, bottom edge excluded.
        let at = |deg: f64| Vector3::new(deg.to_radians().cos(), 0.0, deg.to_radians().sin());
        assert_eq!(spherical_bin(at(10.67 - 1e-9), &s).map(|b| b.0), Some(0));
        assert_eq!(spherical_bin(at(10.68), &s), None);
        assert_eq!(spherical_bin(at(-30.66), &s).map(|b| b.0), Some(31));
        assert_eq!(spherical_bin(at(-30.67 - 1e-9), &s), None);
        // Just below 360 degrees stays in the last column.
        assert_eq!(spherical_bin(Vector3::new(1.0, -1e-12, 0.0), &s).unwrap().1, 1023);
    }

    fn single(p: LidarPoint, class: Option<i64>) -> LabeledCloud {
        LabeledCloud {
            cloud: PointCloud::new(0, 0.0, vec![p]),
            labels: vec![class.map(|c| PointLabel { class: ClassId::new(c).unwrap(), detection_index: 0 })],
            detection_count: 1,
        }
    }

    #[test]
    fn render_examples() {
        let s = spec();
        let empty = render(&LabeledCloud::unlabeled(PointCloud::default(), 0), &s);
        assert_eq!(empty, DepthLabelImage::empty(32, 1024));

        let img = render(&single(LidarPoint::new(8.0, 0.0, 0.0, 0.0), Some(2)), &s);
        let i = img.index(8, 0);
        assert_eq!((img.depth[i], img.label[i]), (8000, 2));
        assert_eq!(img.depth.iter().filter(|&&d| d > 0).count(), 1);
        assert_eq!(img.labeled_pixels(), 1);

        let img = render(&single(LidarPoint::new(40.0, 0.0, 0.0, 0.0), None), &s);
        assert_eq!(img.depth[img.index(8, 0)], 25_000);
        assert_eq!(img.label[img.index(8, 0)], BACKGROUND);
    }

    #[test]
    fn nearest_wins_and_ties_keep_first() {
        let s = spec();
        let car = ClassId::new(2).unwrap();
        let person = ClassId::new(0).unwrap();
        let lc = LabeledCloud {
            cloud: PointCloud::new(0, 0.0, vec![
                LidarPoint::new(10.0, 0.0, 0.0, 0.0),
                LidarPoint::new(5.0, 0.0, 0.0, 0.0),
                LidarPoint::new(30.0, 0.0, 0.0, 0.0),
                LidarPoint::new(40.0, 0.0, 0.0, 0.0),
            ]),
            labels: vec![None, Some(PointLabel { class: car, detection_index: 0 }), None, None],
            detection_count: 1,
        };
        let img = render(&lc, &s);
        assert_eq!((img.depth[img.index(8, 0)], img.label[img.index(8, 0)]), (5000, 2));

        // Both clamp to 25 000 mm; the first point's label stays.
        let lc = LabeledCloud {
            cloud: PointCloud::new(0, 0.0, vec![LidarPoint::new(30.0, 0.0, 0.0, 0.0), LidarPoint::new(40.0, 0.0, 0.0, 0.0)]),
            labels: vec![Some(PointLabel { class: person, detection_index: 0 }), None],
            detection_count: 1,
        };
        let img = render(&lc, &s);
        assert_eq!(img.label[img.index(8, 0)], 0);
    }

    #[test]
    fn png_roundtrip_and_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let mut img = DepthLabelImage::empty(32, 1024);
        img.depth[5] = 25_000;
        img.label[5] = 79;
        img.depth[700] = 1234;
        img.label[700] = 0;
        img.depth[33] = 17;
        let (dp, lp) = (dir.path().join("d.png"), dir.path().join("l.png"));
        write_raster(&img, &dp, &lp).unwrap();
        assert_eq!(read_raster(&dp, &lp, &s).unwrap(), img);

        let raw = std::fs::read(&lp).unwrap();
        let mut reader = png::Decoder::new(std::io::Cursor::new(raw)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(buf[0], 255);
        assert_eq!(buf[5], 79);
    }

    #[test]
    fn wrong_shape_or_content_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let small = DepthLabelImage::empty(16, 1024);
        let (dp, lp) = (dir.path().join("d.png"), dir.path().join("l.png"));
        write_raster(&small, &dp, &lp).unwrap();
        assert!(matches!(read_raster(&dp, &lp, &s), Err(RasterError::DimensionMismatch { rows: 16, cols: 1024, .. })));

        // Depth and label swapped: bit depths disagree.
        let img = DepthLabelImage::empty(32, 1024);
        write_raster(&img, &dp, &lp).unwrap();
        assert!(matches!(read_raster(&lp, &dp, &s), Err(RasterError::Malformed(_))));

        let mut bad = DepthLabelImage::empty(32, 1024);
        bad.label[0] = 100;
        assert!(matches!(write_raster(&bad, &dp, &lp), Err(RasterError::Malformed(_))));

        std::fs::write(&dp, b"not a png").unwrap();
        assert!(read_raster(&dp, &lp, &s).is_err());
    }

    proptest! {
        #[test]
        fn bins_stay_in_range(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0) {
            prop_assume!(x.abs() + y.abs() + z.abs() > 1e-6);
            if let Some((r, c)) = spherical_bin(Vector3::new(x, y, z), &spec()) {
                prop_assert!(r < 32 && c < 1024);
            }
        }

        #[test]
        fn depth_quantization_bound(x in -30.0f64..30.0, y in -30.0f64..30.0, z in -10.0f64..3.0) {
            let p = Vector3::new(x, y, z);
            prop_assume!(p.norm() > 0.01);
            let d = depth_mm(p, &spec()) as f64;
            let truth = (1000.0 * p.norm()).min(25_000.0);
            prop_assert!((d - truth).abs() <= 0.5);
        }

        #[test]
        fn render_is_order_invariant_without_ties(
            pts in prop::collection::vec((prop::array::uniform3(-30.0f32..30.0), prop::option::of(0i64..80)), 1..80),
        ) {
            let s = spec();
            let lc = LabeledCloud {
                cloud: PointCloud::new(0, 0.0, pts.iter().map(|(p, _)| LidarPoint::new(p[0], p[1], p[2], 0.0)).collect()),
                labels: pts.iter().map(|(_, c)| c.map(|c| PointLabel { class: ClassId::new(c).unwrap(), detection_index: 0 })).collect(),
                detection_count: 1,
            };
            let mut depths: Vec<(usize, u16)> = lc.cloud.points.iter().filter_map(|p| {
                let b = spherical_bin(p.position(), &s)?;
                Some((b.0 * s.cols + b.1, depth_mm(p.position(), &s)))
            }).collect();
            depths.sort();
            prop_assume!(depths.windows(2).all(|w| w[0] != w[1]));

            let mut rev = lc.clone();
            rev.cloud.points.reverse();
            rev.labels.reverse();
            prop_assert_eq!(render(&lc, &s), render(&rev, &s));
        }
    }
}
