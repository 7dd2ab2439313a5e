//! Deterministic multi-agent LiDAR and communication simulator.
//!
//! A [`Scene`] is expanded from a TOML [`ScenarioConfig`]: agents and other
//! vehicles move with constant speed and turn rate, every agent sweeps a
//! rolling-shutter LiDAR, messages travel through a latency queue and agent
//! poses can be corrupted by Gaussian localization noise. All randomness is
//! drawn from seeded ChaCha generators.

pub mod detect;
pub mod lidar;
pub mod network;
pub mod scenario;

pub use detect::{detect_boxes, oracle_detections, select_queries, DetectorConfig, OracleNoise, QueryConfig};
pub use lidar::{deskew, lidar_scan, lidar_scan_labeled, ray_box, LabeledScan};
pub use network::{inject_pose_noise, Delivery, DeliveryQueue, ErrorModel, LatencySpec};
pub use scenario::{ground_truth_at, Actor, ConfigError, DetectionRange, RunSpec, ScenarioConfig, Scene};
