//! Projection-based labeling of lidar points by 2D detection boxes.

use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{LabeledCloud, PointCloud, PointLabel};
use crate::detections::Detection;
use crate::geometry::{project_pinhole, transform_point, CameraRig};

#[derive(Debug, Error)]
pub enum FrustumError {
    #[error("detection index {index} out of range for {count} detections")]
    IndexOutOfRange { index: usize, count: usize },
}

/// Labels each point with the detection whose box contains its projection.
///
/// Cameras are tried in rig order and only the first camera whose image
/// contains the projected point is used. Within that camera the
/// smallest-area containing box wins, then the lowest detection index.
/// Projection is ideal pinhole since boxes live on undistorted images.
pub fn label_points(cloud: PointCloud, rig: &CameraRig, dets: &[Detection]) -> LabeledCloud {
    // Per camera, candidate detection indices ordered by (area, index).
    let per_camera: Vec<Vec<usize>> = rig
        .cameras()
        .iter()
        .map(|cam| {
            let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].camera_id == cam.id).collect();
            idx.sort_by(|&a, &b| dets[a].bbox.area().total_cmp(&dets[b].bbox.area()).then(a.cmp(&b)));
            idx
        })
        .collect();

    let labels = if dets.is_empty() {
        vec![None; cloud.len()]
    } else {
        cloud
            .points
            .par_iter()
            .map(|p| {
                let pos = p.position();
                for (cam, candidates) in rig.cameras().iter().zip(&per_camera) {
                    let Ok(px) = project_pinhole(&cam.intrinsics, transform_point(&cam.extrinsics, pos)) else {
                        continue;
                    };
                    if !cam.intrinsics.contains(px) {
                        continue;
                    }
                    return candidates.iter().find(|&&i| dets[i].bbox.contains(px.x, px.y)).map(|&i| PointLabel {
                        class: dets[i].class,
                        detection_index: i as u32,
                    });
                }
                None
            })
            .collect()
    };
    LabeledCloud { cloud, labels, detection_count: dets.len() }
}

/// Indices of points assigned to `detection_index`, in point order.
pub fn extract_frustum(lc: &LabeledCloud, detection_index: usize) -> Result<Vec<usize>, FrustumError> {
    if detection_index >= lc.detection_count {
        return Err(FrustumError::IndexOutOfRange { index: detection_index, count: lc.detection_count });
    }
    Ok(lc
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_some_and(|l| l.detection_index as usize == detection_index))
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::LidarPoint;
    use crate::detections::{BBox, ClassId};

    fn det(cam: u32, class: i64, b: [f64; 4]) -> Detection {
        Detection {
            frame_id: 0,
            camera_id: cam,
            class: ClassId::new(class).unwrap(),
            score: 0.9,
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        }
    }

    fn ahead_of_camera0(n: usize) -> PointCloud {
        // Camera 0 of the reference rig looks along +x.
        let points = (0..n)
            .map(|i| {
                let t = i as f32 / n as f32;
                LidarPoint::new(6.0 + 4.0 * t, -2.0 + 4.0 * t, -1.0 + t, 0.5)
            })
            .collect();
        PointCloud::new(0, 0.0, points)
    }

    #[test]
    fn no_detections_no_labels() {
        let lc = label_points(ahead_of_camera0(50), &CameraRig::reference(), &[]);
        assert_eq!(lc.labels.len(), 50);
        assert_eq!(lc.labeled_count(), 0);
    }

    #[test]
    fn full_image_box_labels_everything_in_view() {
        let rig = CameraRig::reference();
        let dets = [det(0, 2, [0.0, 0.0, 1024.0, 768.0])];
        let lc = label_points(ahead_of_camera0(50), &rig, &dets);
        assert!(lc.labels.iter().all(|l| *l == Some(PointLabel { class: ClassId::new(2).unwrap(), detection_index: 0 })));
        assert_eq!(extract_frustum(&lc, 0).unwrap(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn smallest_box_wins_then_lowest_index() {
        let rig = CameraRig::reference();
        // Point straight ahead projects near the principal point column.
        let cloud = PointCloud::new(0, 0.0, vec![LidarPoint::new(10.0, 0.0, 0.0, 0.0)]);
        let big = det(0, 7, [100.0, 100.0, 900.0, 700.0]);
        let small = det(0, 0, [400.0, 300.0, 600.0, 500.0]);
        let lc = label_points(cloud.clone(), &rig, &[big, small]);
        assert_eq!(lc.labels[0].unwrap().detection_index, 1);
        let lc = label_points(cloud.clone(), &rig, &[small, small]);
        assert_eq!(lc.labels[0].unwrap().detection_index, 0);
        // Boxes on other cameras never match.
        let lc = label_points(cloud, &rig, &[det(1, 0, [0.0, 0.0, 1024.0, 768.0])]);
        assert!(lc.labels[0].is_none());
    }

    #[test]
    fn points_behind_every_camera_stay_unlabeled() {
        let rig = CameraRig::reference();
        // Straight up is outside every camera's image.
        let cloud = PointCloud::new(0, 0.0, vec![LidarPoint::new(0.0, 0.0, 30.0, 0.0)]);
        let dets: Vec<_> = (0..5).map(|c| det(c, 0, [0.0, 0.0, 1024.0, 768.0])).collect();
        assert!(label_points(cloud, &rig, &dets).labels[0].is_none());
    }

    #[test]
    fn extract_out_of_range() {
        let lc = label_points(ahead_of_camera0(3), &CameraRig::reference(), &[det(0, 0, [0.0, 0.0, 1.0, 1.0])]);
        assert!(extract_frustum(&lc, 0).unwrap().is_empty());
        assert!(matches!(extract_frustum(&lc, 1), Err(FrustumError::IndexOutOfRange { index: 1, count: 1 })));
    }
}
