//! Orientation estimation on SO(3).
//!
//! - [`so3`]: rotation representations, exp/log maps, geodesic distances
//! - [`pose`]: flat pose vectors (axis-angle or quaternion) used as targets
//! - [`dictionary`]: K-means key poses, hard and soft pose labels
//! - [`models`]: MLP pose networks and Bin & Delta composition
//! - [`losses`]: geodesic, classification and all Bin & Delta objectives
//! - [`gradcheck`]: finite-difference verification of objective gradients
//! - [`jitter`]: 3D pose jittering with DLT homographies
//! - [`eval`]: MedErr, Acc, ARP, AVP and detection analysis
//! - [`harness`]: synthetic data, training and experiment reports

pub mod dictionary;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod jitter;
pub mod losses;
pub mod models;
pub mod pose;
pub mod so3;

pub use error::{Error, Result};
