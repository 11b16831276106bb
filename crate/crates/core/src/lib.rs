//! Desk-scale self-supervised 4D field pre-training.
//!
//! The pipeline simulates lidar and camera data over a procedural world,
//! turns future sensor data into 4D supervision (occupancy, distilled
//! features and ego-path), fits a continuous field to it and evaluates the
//! result against exact ground truth.

pub mod eval;
pub mod field;
pub mod format;
pub mod geom;
pub mod par;
pub mod pca;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod scene;

pub use geom::{AugmentConfig, Pose, Ray, Vec3};
pub use scene::{LidarScan, Scene};
