//! Labels lidar points by projecting them into camera images and testing
//! them against 2D detection boxes, refines each frustum with k-means, and
//! renders spherical depth/label rasters.
//!
//! The stages are plain functions over in-memory types; [`pipeline`] wires
//! them to files and a worker pool.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod cluster;
pub mod config;
pub mod depth;
pub mod detections;
pub mod eval;
pub mod frustum;
pub mod geometry;
pub mod pipeline;
pub mod synth;

pub use cloud::{LabeledCloud, LidarPoint, PointCloud, PointLabel};
pub use cluster::{kmeans, refine_frustum, KMeansConfig, RefineConfig, RefinementStats, Selection};
pub use depth::{render, DepthImageSpec, DepthLabelImage};
pub use detections::{BBox, ClassId, Detection, DetectionSet};
pub use eval::{accumulate, compare, EvalReport, TimingReport};
pub use frustum::label_points;
pub use geometry::{Camera, CameraRig, DistortionCoeffs, Extrinsics, Intrinsics};
pub use pipeline::{process_frame, run_eval, run_pipeline, FrameConfig, PipelineConfig};
pub use synth::{generate_scene, GroundTruthBundle, SceneConfig};
