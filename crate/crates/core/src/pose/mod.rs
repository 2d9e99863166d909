//! Synthetic multi-view capture rig, dataset format and the MPJPE metric.

mod camera;
mod dataset;
mod geometry;
mod metric;
mod motion;
mod noise;
mod skeleton;

pub use camera::{project_virtual_view, sample_rig, CameraModel, RigConfig, ViewProjection};
pub use dataset::{read_dataset, synthesize, write_dataset, BlobInfo, CaptureDataset, SequenceRecord, SynthConfig};
pub use geometry::Mat3;
pub use metric::mpjpe;
pub use motion::{generate_motion, MotionParams, MotionSequence};
pub use noise::{simulate_detection, NoiseParams, OCCLUDED_CONF_MAX};
pub use skeleton::{Detection2D, Pose3D, SkeletonTopology};
