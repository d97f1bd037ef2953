//! Procedural articulated objects, rendering and dataset generation.

pub mod camera;
pub mod dataset;
pub mod iou;
pub mod kinematics;
pub mod raster;
pub mod rig;

pub use camera::CameraPose;
pub use dataset::{generate_dataset, load_sample, DatasetConfig, DatasetManifest, SampleRecord, Split, ViewSample};
pub use iou::compute_bbox_iou;
pub use kinematics::forward_kinematics;
pub use raster::{degrade_skeleton, render_view, RenderMode};
pub use rig::{sample_object, AnimationTrack, ArticulatedObject, BoneGraph, GeneratorConfig, Joint};
