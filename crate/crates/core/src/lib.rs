//! Visual-depth-inertial odometry for RGB-D cameras with an IMU.
//!
//! The pipeline detects keypoints in a combined visual/depth score map,
//! describes them with binary tests over both modalities, tracks them
//! through a robocentric error-state EKF and reports the estimated
//! trajectory. A synthetic scene simulator and trajectory evaluation tools
//! are included for testing.

pub mod calib;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod detect;
pub mod ekf;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod image;
pub mod pipeline;
pub mod registration;
pub mod sim;
pub mod tracking;

pub use error::{Error, ErrorClass, Result};
