//! Algorithmic core for cooperative LiDAR object detection.
//!
//! The crate covers the parts of a query-based cooperative detector that
//! need no trained weights: sparse coordinate algebra, heading codes, pose /
//! temporal / spatial alignment of shared perception, the CPM wire format,
//! and a deterministic multi-agent LiDAR simulator with evaluation metrics
//! to exercise all of it.

pub mod augment;
pub mod codec;
pub mod cpm;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod sim;
pub mod pose_align;
pub mod sparse;
pub mod spatial;
pub mod temporal;

pub use cpm::Cpm;
pub use geometry::{BBox, Frame, Pose, TimedPoint, TimedPointCloud};
pub use temporal::{MemoryQueue, Query};
