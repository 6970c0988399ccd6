//! Single-stage pillar-based 3D object detection: point-cloud handling,
//! pillarization, attention-pooled pillar encoding, a re-parameterizable
//! backbone, a center-based head and the training losses.

pub mod checkpoint;
pub mod dethead;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod mape;
pub mod model;
pub mod pillargrid;
pub mod pointcloud;
pub mod profile;
pub mod repnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
