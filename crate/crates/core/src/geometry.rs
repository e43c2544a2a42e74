//! Camera and lidar geometry: rigid transforms, pinhole projection,
//! Brown–Conrady distortion and the calibration file format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Maximum fixed-point iterations used when inverting the distortion model.
pub const UNDISTORT_MAX_ITER: usize = 50;
/// Residual below which an undistorted point is accepted.
pub const UNDISTORT_TOL: f64 = 1e-9;
/// Tolerance on `R^T R = I` and `det R = 1` for extrinsic rotations.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("undistortion did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("camera {camera_id}: invalid {field}: {reason}")]
    Invariant {
        camera_id: u32,
        field: &'static str,
        reason: String,
    },
    #[error("calibration parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("calibration io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Intrinsics { fx, fy, cx, cy, width, height };
        intr.validate(0)?;
        Ok(intr)
    }

    pub(crate) fn validate(&self, camera_id: u32) -> Result<(), GeometryError> {
        let fail = |field, reason: String| GeometryError::Invariant { camera_id, field, reason };
        if self.width == 0 || self.height == 0 {
            return Err(fail("size", format!("{}x{} must be positive", self.width, self.height)));
        }
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return Err(fail("fx", format!("{} must be > 0", self.fx)));
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return Err(fail("fy", format!("{} must be > 0", self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(fail("cx", format!("{} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(fail("cy", format!("{} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    /// Pixel to normalized image plane.
    pub fn normalize(&self, pixel: Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    /// Normalized image plane to pixel.
    pub fn denormalize(&self, n: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    /// Half-open containment in `[0, width) x [0, height)`.
    pub fn contains(&self, pixel: Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width as f64 && pixel.y >= 0.0 && pixel.y < self.height as f64
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

/// Brown–Conrady radial (k1, k2, k3) and tangential (p1, p2) coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistortionCoeffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl DistortionCoeffs {
    pub const ZERO: DistortionCoeffs = DistortionCoeffs { k1: 0.0, k2: 0.0, k3: 0.0, p1: 0.0, p2: 0.0 };

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    fn validate(&self, camera_id: u32) -> Result<(), GeometryError> {
        for (field, v) in [("k1", self.k1), ("k2", self.k2), ("k3", self.k3), ("p1", self.p1), ("p2", self.p2)] {
            if !v.is_finite() {
                return Err(GeometryError::Invariant { camera_id, field, reason: format!("{v} is not finite") });
            }
        }
        Ok(())
    }

    fn radial(&self, r2: f64) -> f64 {
        1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
    }

    /// Jacobian of [`distort`] with respect to the undistorted point.
    fn jacobian(&self, n: Vector2<f64>) -> Matrix2<f64> {
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = self.radial(r2);
        // d(radial)/d(r2) * 2
        let dr = 2.0 * self.k1 + r2 * (4.0 * self.k2 + 6.0 * self.k3 * r2);
        Matrix2::new(
            radial + dr * x * x + 2.0 * self.p1 * y + 6.0 * self.p2 * x,
            dr * x * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            dr * x * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            radial + dr * y * y + 6.0 * self.p1 * y + 2.0 * self.p2 * x,
        )
    }
}

/// Rigid transform mapping lidar-frame coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ext = Extrinsics { rotation, translation };
        ext.validate(0)?;
        Ok(ext)
    }

    pub fn identity() -> Self {
        Extrinsics { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    fn validate(&self, camera_id: u32) -> Result<(), GeometryError> {
        let fail = |field, reason: String| GeometryError::Invariant { camera_id, field, reason };
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(fail("extrinsics", "non-finite entry".into()));
        }
        let ortho_err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if ortho_err > ROTATION_TOL {
            return Err(fail("rotation", format!("not orthonormal (max |R^T R - I| = {ortho_err:e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(fail("rotation", format!("determinant {det} != +1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub intrinsics: Intrinsics,
    pub distortion: DistortionCoeffs,
    pub extrinsics: Extrinsics,
}

/// Ordered set of calibrated cameras sharing one lidar.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        if cameras.is_empty() {
            return Err(GeometryError::Invariant { camera_id: 0, field: "cameras", reason: "rig is empty".into() });
        }
        for (i, cam) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|c| c.id == cam.id) {
                return Err(GeometryError::Invariant {
                    camera_id: cam.id,
                    field: "camera_id",
                    reason: "duplicate id".into(),
                });
            }
            cam.intrinsics.validate(cam.id)?;
            cam.distortion.validate(cam.id)?;
            cam.extrinsics.validate(cam.id)?;
        }
        Ok(CameraRig { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, id: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// Position of camera `id` in rig order.
    pub fn position(&self, id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    /// Synthetic five-camera ring around the lidar, 72 degrees apart.
    ///
    /// Camera `i` looks along lidar azimuth `72 * i` degrees. Camera axes
    /// follow the usual convention (x right, y down, z forward); the lidar
    /// frame is x forward, y left, z up.
    pub fn reference() -> Self {
        let cameras = (0..5u32)
            .map(|i| {
                let yaw = (72.0 * i as f64).to_radians();
                let (s, c) = yaw.sin_cos();
                #[rustfmt::skip]
                let rotation = Matrix3::new(
                    s,   -c,   0.0,
                    0.0, 0.0, -1.0,
                    c,   s,    0.0,
                );
                let center = Vector3::new(0.06 * c, 0.06 * s, -0.25);
                Camera {
                    id: i,
                    intrinsics: Intrinsics { fx: 600.0, fy: 600.0, cx: 512.0, cy: 384.0, width: 1024, height: 768 },
                    distortion: DistortionCoeffs { k1: -0.22, k2: 0.05, k3: 0.0, p1: 1e-4, p2: -2e-4 },
                    extrinsics: Extrinsics { rotation, translation: -(rotation * center) },
                }
            })
            .collect();
        CameraRig { cameras }
    }
}

/// Lidar frame to camera frame.
pub fn transform_point(ext: &Extrinsics, p_lidar: Vector3<f64>) -> Vector3<f64> {
    ext.rotation * p_lidar + ext.translation
}

/// Ideal pinhole projection to continuous pixel coordinates. The result is
/// not bounds-checked.
pub fn project_pinhole(intr: &Intrinsics, p_cam: Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !(p_cam.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: p_cam.z });
    }
    Ok(Vector2::new(intr.fx * p_cam.x / p_cam.z + intr.cx, intr.fy * p_cam.y / p_cam.z + intr.cy))
}

/// Forward Brown–Conrady model on normalized coordinates.
pub fn distort(d: &DistortionCoeffs, n: Vector2<f64>) -> Vector2<f64> {
    let (x, y) = (n.x, n.y);
    let r2 = x * x + y * y;
    let radial = d.radial(r2);
    Vector2::new(
        x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x),
        y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y,
    )
}

/// Inverts [`distort`] by iterating the Newton map seeded at the distorted
/// point. Falls back to the classic `x = (x_d - tangential) / radial` update
/// when the Jacobian is singular.
pub fn undistort_point(d: &DistortionCoeffs, n_distorted: Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
    if d.is_zero() {
        return Ok(n_distorted);
    }
    let mut n = n_distorted;
    let mut residual = (distort(d, n) - n_distorted).norm();
    let mut iterations = 0;
    while iterations < UNDISTORT_MAX_ITER && residual > 1e-15 {
        iterations += 1;
        let f = distort(d, n) - n_distorted;
        let step = match d.jacobian(n).try_inverse() {
            Some(inv) => inv * f,
            None => {
                let r2 = n.norm_squared();
                let tangential = distort(d, n) - n * d.radial(r2);
                n - (n_distorted - tangential) / d.radial(r2)
            }
        };
        // Backtrack while the step increases the residual.
        let mut scale = 1.0;
        let mut candidate = n - step;
        let mut cand_res = (distort(d, candidate) - n_distorted).norm();
        while cand_res > residual && scale > 1e-4 {
            scale *= 0.5;
            candidate = n - step * scale;
            cand_res = (distort(d, candidate) - n_distorted).norm();
        }
        if cand_res >= residual {
            break;
        }
        n = candidate;
        residual = cand_res;
    }
    if residual > UNDISTORT_TOL || !residual.is_finite() {
        return Err(GeometryError::NonConvergence { residual, iterations });
    }
    Ok(n)
}

/// Per-destination-pixel source coordinates for rectifying a distorted image.
#[derive(Debug, Clone, PartialEq)]
pub struct UndistortMap {
    pub width: u32,
    pub height: u32,
    /// Row-major `height x width` source pixel coordinates; `None` marks a
    /// destination pixel whose source lies outside the distorted image.
    pub source: Vec<Option<Vector2<f64>>>,
}

impl UndistortMap {
    pub fn get(&self, u: u32, v: u32) -> Option<Vector2<f64>> {
        self.source[(v * self.width + u) as usize]
    }

    pub fn invalid_count(&self) -> usize {
        self.source.iter().filter(|s| s.is_none()).count()
    }
}

/// Builds the rectification remap grid. Valid source coordinates lie in
/// `[0, width - 1] x [0, height - 1]` so they can be sampled bilinearly.
pub fn compute_undistort_map(intr: &Intrinsics, d: &DistortionCoeffs) -> UndistortMap {
    let (w, h) = (intr.width, intr.height);
    let max_u = (w - 1) as f64;
    let max_v = (h - 1) as f64;
    let mut source = Vec::with_capacity((w * h) as usize);
    if d.is_zero() {
        // Skip the normalize/denormalize round trip so the identity is exact.
        for v in 0..h {
            source.extend((0..w).map(|u| Some(Vector2::new(u as f64, v as f64))));
        }
        return UndistortMap { width: w, height: h, source };
    }
    for v in 0..h {
        for u in 0..w {
            let n = intr.normalize(Vector2::new(u as f64, v as f64));
            let s = intr.denormalize(distort(d, n));
            let valid = s.x.is_finite() && s.y.is_finite() && (0.0..=max_u).contains(&s.x) && (0.0..=max_v).contains(&s.y);
            source.push(valid.then_some(s));
        }
    }
    UndistortMap { width: w, height: h, source }
}

/// Reads a rig calibration file.
///
/// Each camera starts with a `camera <id>` line followed by 23
/// whitespace-separated numbers: 9 rotation entries (row-major), 3
/// translation entries, `fx fy cx cy width height`, then `k1 k2 p1 p2 k3`.
/// Text after `#` is ignored.
pub fn load_rig(path: impl AsRef<Path>) -> Result<CameraRig, GeometryError> {
    parse_rig(&std::fs::read_to_string(path)?)
}

const RIG_FIELDS: usize = 23;

pub fn parse_rig(text: &str) -> Result<CameraRig, GeometryError> {
    struct Pending {
        id: u32,
        header_line: usize,
        values: Vec<f64>,
    }

    fn finish(p: Pending) -> Result<Camera, GeometryError> {
        if p.values.len() != RIG_FIELDS {
            return Err(GeometryError::Parse {
                line: p.header_line,
                message: format!("camera {} has {} values, expected {RIG_FIELDS}", p.id, p.values.len()),
            });
        }
        let v = &p.values;
        let dim = |x: f64, field| {
            if x.fract() == 0.0 && x > 0.0 && x <= u32::MAX as f64 {
                Ok(x as u32)
            } else {
                Err(GeometryError::Invariant { camera_id: p.id, field, reason: format!("{x} is not a positive integer") })
            }
        };
        Ok(Camera {
            id: p.id,
            extrinsics: Extrinsics {
                rotation: Matrix3::from_row_slice(&v[0..9]),
                translation: Vector3::new(v[9], v[10], v[11]),
            },
            intrinsics: Intrinsics {
                fx: v[12],
                fy: v[13],
                cx: v[14],
                cy: v[15],
                width: dim(v[16], "width")?,
                height: dim(v[17], "height")?,
            },
            distortion: DistortionCoeffs { k1: v[18], k2: v[19], p1: v[20], p2: v[21], k3: v[22] },
        })
    }

    let mut cameras = Vec::new();
    let mut current: Option<Pending> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace().peekable();
        if tokens.peek() == Some(&"camera") {
            tokens.next();
            let id = tokens
                .next()
                .and_then(|t| t.parse::<u32>().ok())
                .ok_or_else(|| GeometryError::Parse { line: line_no, message: "expected `camera <id>`".into() })?;
            if tokens.next().is_some() {
                return Err(GeometryError::Parse { line: line_no, message: "trailing tokens after camera id".into() });
            }
            if let Some(p) = current.take() {
                cameras.push(finish(p)?);
            }
            current = Some(Pending { id, header_line: line_no, values: Vec::with_capacity(RIG_FIELDS) });
            continue;
        }
        let pending = current
            .as_mut()
            .ok_or_else(|| GeometryError::Parse { line: line_no, message: "values before first `camera` header".into() })?;
        for tok in tokens {
            let value = tok
                .parse::<f64>()
                .map_err(|_| GeometryError::Parse { line: line_no, message: format!("invalid number `{tok}`") })?;
            pending.values.push(value);
        }
    }
    if let Some(p) = current.take() {
        cameras.push(finish(p)?);
    }
    CameraRig::new(cameras)
}

/// Serializes a rig in the format read by [`parse_rig`].
pub fn format_rig(rig: &CameraRig) -> String {
    let mut out = String::from("# rotation (row-major), translation [m], fx fy cx cy width height, k1 k2 p1 p2 k3\n");
    for cam in rig.cameras() {
        let r = &cam.extrinsics.rotation;
        let t = &cam.extrinsics.translation;
        let i = &cam.intrinsics;
        let d = &cam.distortion;
        let _ = writeln!(out, "camera {}", cam.id);
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]
        );
        let _ = writeln!(out, "{} {} {}", t.x, t.y, t.z);
        let _ = writeln!(out, "{} {} {} {} {} {}", i.fx, i.fy, i.cx, i.cy, i.width, i.height);
        let _ = writeln!(out, "{} {} {} {} {}", d.k1, d.k2, d.p1, d.p2, d.k3);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    fn rot_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn transform_examples() {
        let id = Extrinsics::identity();
        assert_eq!(transform_point(&id, Vector3::new(1.0, 2.0, 3.0)), Vector3::new(1.0, 2.0, 3.0));
        let shift = Extrinsics::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(transform_point(&shift, Vector3::zeros()), Vector3::new(0.0, 0.0, 5.0));
        let rz = Extrinsics::new(rot_z(90.0), Vector3::zeros()).unwrap();
        let p = transform_point(&rz, Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn project_examples() {
        let i = intr();
        assert_eq!(project_pinhole(&i, Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(320.0, 240.0));
        assert_eq!(project_pinhole(&i, Vector3::new(1.0, 0.0, 2.0)).unwrap(), Vector2::new(570.0, 240.0));
        assert!(matches!(project_pinhole(&i, Vector3::new(0.0, 0.0, -1.0)), Err(GeometryError::BehindCamera { .. })));
        assert!(project_pinhole(&i, Vector3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn distort_examples() {
        let n = Vector2::new(0.3, -0.2);
        assert_eq!(distort(&DistortionCoeffs::ZERO, n), n);
        let d = DistortionCoeffs { k1: 0.2, k2: -0.1, k3: 0.05, p1: 0.01, p2: -0.02 };
        assert_eq!(distort(&d, Vector2::zeros()), Vector2::zeros());
        let k1 = DistortionCoeffs { k1: -0.1, ..DistortionCoeffs::ZERO };
        let out = distort(&k1, Vector2::new(0.5, 0.0));
        assert!((out.x - 0.4875).abs() < 1e-15 && out.y == 0.0);
    }

    #[test]
    fn undistort_examples() {
        let n = Vector2::new(0.2, 0.1);
        assert_eq!(undistort_point(&DistortionCoeffs::ZERO, n).unwrap(), n);
        let d = DistortionCoeffs { k1: -0.25, k2: 0.07, k3: 0.0, p1: 1e-3, p2: 1e-3 };
        assert!(undistort_point(&d, Vector2::zeros()).unwrap().norm() < 1e-15);
        let k1 = DistortionCoeffs { k1: -0.1, ..DistortionCoeffs::ZERO };
        let out = undistort_point(&k1, Vector2::new(0.4875, 0.0)).unwrap();
        assert!((out - Vector2::new(0.5, 0.0)).norm() < 1e-12, "{out}");
        assert!((distort(&k1, out) - Vector2::new(0.4875, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn undistort_reports_non_convergence() {
        // r * (1 - 2 r^2) peaks at r = 0.408 with value 0.272; 0.5 has no preimage.
        let d = DistortionCoeffs { k1: -2.0, ..DistortionCoeffs::ZERO };
        assert!(matches!(undistort_point(&d, Vector2::new(0.5, 0.0)), Err(GeometryError::NonConvergence { .. })));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = DistortionCoeffs { k1: -0.21, k2: 0.13, k3: 0.02, p1: 0.007, p2: -0.004 };
        let n = Vector2::new(0.37, -0.52);
        let h = 1e-6;
        let j = d.jacobian(n);
        for col in 0..2 {
            let mut e = Vector2::zeros();
            e[col] = h;
            let fd = (distort(&d, n + e) - distort(&d, n - e)) / (2.0 * h);
            for row in 0..2 {
                assert!((fd[row] - j[(row, col)]).abs() < 1e-8, "J[{row},{col}]");
            }
        }
    }

    #[test]
    fn undistort_map_identity_for_zero_coeffs() {
        let i = Intrinsics { fx: 50.0, fy: 40.0, cx: 16.0, cy: 12.0, width: 32, height: 24 };
        let map = compute_undistort_map(&i, &DistortionCoeffs::ZERO);
        for v in 0..24 {
            for u in 0..32 {
                assert_eq!(map.get(u, v), Some(Vector2::new(u as f64, v as f64)));
            }
        }
    }

    #[test]
    fn undistort_map_fixes_principal_point() {
        let i = Intrinsics { fx: 50.0, fy: 40.0, cx: 16.0, cy: 12.0, width: 32, height: 24 };
        let d = DistortionCoeffs { k1: -0.3, k2: 0.1, k3: 0.01, p1: 0.01, p2: 0.01 };
        assert_eq!(compute_undistort_map(&i, &d).get(16, 12), Some(Vector2::new(16.0, 12.0)));
    }

    #[test]
    fn barrel_corners_fall_outside_source() {
        // Wide field of view: corner (0,0) normalizes to (-3.2, -2.4), r^2 = 16,
        // radial factor 1 - 0.3 * 16 = -3.8, so the source lands at
        // (12.16, 9.12) normalized = (1536, 1152) px: flipped sign, off-image.
        let i = Intrinsics { fx: 100.0, fy: 100.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
        let d = DistortionCoeffs { k1: -0.3, ..DistortionCoeffs::ZERO };
        let n = intr_norm(&i, 0.0, 0.0);
        let s = distort(&d, n);
        assert!(n.x < 0.0 && s.x > 0.0 && n.y < 0.0 && s.y > 0.0);
        assert!((i.denormalize(s) - Vector2::new(1536.0, 1152.0)).norm() < 1e-9);
        let map = compute_undistort_map(&i, &d);
        assert_eq!(map.get(0, 0), None);
        assert_eq!(map.get(639, 479), None);
        assert!(map.get(320, 240).is_some());
        assert!(map.invalid_count() > 0);
    }

    fn intr_norm(i: &Intrinsics, u: f64, v: f64) -> Vector2<f64> {
        i.normalize(Vector2::new(u, v))
    }

    #[test]
    fn rig_roundtrip_and_errors() {
        let rig = CameraRig::reference();
        assert_eq!(rig.cameras().len(), 5);
        let parsed = parse_rig(&format_rig(&rig)).unwrap();
        assert_eq!(parsed, rig);

        let bad = format_rig(&rig).replacen("600 600 512 384", "600 600 2000 384", 1);
        match parse_rig(&bad) {
            Err(GeometryError::Invariant { camera_id: 0, field: "cx", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let dup = format!("{}{}", format_rig(&rig), format_rig(&rig));
        assert!(matches!(parse_rig(&dup), Err(GeometryError::Invariant { field: "camera_id", .. })));
        assert!(matches!(parse_rig("camera 0\n1 2 3\n"), Err(GeometryError::Parse { line: 1, .. })));
        assert!(matches!(parse_rig("1 2 3\n"), Err(GeometryError::Parse { line: 1, .. })));
        assert!(matches!(parse_rig("camera 0\n1 x 3\n"), Err(GeometryError::Parse { line: 2, .. })));
        assert!(parse_rig("# nothing\n").is_err());
    }

    #[test]
    fn rig_rejects_non_rotation() {
        let text = "camera 3\n1 0 0 0 1 0 0 0 -1\n0 0 0\n500 500 320 240 640 480\n0 0 0 0 0\n";
        match parse_rig(text) {
            Err(GeometryError::Invariant { camera_id: 3, field: "rotation", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reference_rig_cameras_face_their_azimuth() {
        let rig = CameraRig::reference();
        for (i, cam) in rig.cameras().iter().enumerate() {
            let yaw = (72.0 * i as f64).to_radians();
            let p = Vector3::new(10.0 * yaw.cos(), 10.0 * yaw.sin(), 0.0);
            let px = project_pinhole(&cam.intrinsics, transform_point(&cam.extrinsics, p)).unwrap();
            assert!((px.x - 512.0).abs() < 1e-9, "camera {i}: {px}");
            assert!(px.y < 384.0, "camera mounted below the lidar sees z = 0 above center");
        }
    }

    proptest! {
        #[test]
        fn rigid_motion_preserves_distance(
            yaw in -3.1f64..3.1, pitch in -1.5f64..1.5, roll in -3.1f64..3.1,
            t in prop::array::uniform3(-5.0f64..5.0),
            a in prop::array::uniform3(-50.0f64..50.0),
            b in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let rot = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
            let ext = Extrinsics::new(rot, Vector3::from(t)).unwrap();
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let before = (a - b).norm();
            let after = (transform_point(&ext, a) - transform_point(&ext, b)).norm();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn projection_is_scale_invariant(x in -10.0f64..10.0, y in -10.0f64..10.0, z in 0.1f64..50.0) {
            let i = intr();
            let p = Vector3::new(x, y, z);
            let a = project_pinhole(&i, p).unwrap();
            let b = project_pinhole(&i, 2.0 * p).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
