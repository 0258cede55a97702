//! Repeated-instance-aware scene reconstruction building blocks: camera
//! geometry, reconstruction metrics, pose layout optimization, set-aware
//! attention, flow matching and a synthetic scene generator.

pub mod checks;
pub mod defaults;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod scenegen;
pub mod setattn;
pub mod spatial;

pub use defaults::defaults;
pub use error::{Error, Result};
pub use geometry::{
    apply_pose, project, unproject, CameraIntrinsics, DepthMap, InstanceMask, Pixel, Point3, PointCloud,
    Pose,
};
pub use layout::{LayoutConfig, LayoutResult};
pub use metrics::MetricReport;
pub use scenegen::SceneSpec;
