//! Prior-map-assisted LiDAR localization.
//!
//! Scan-to-map registration with degeneracy detection feeds masked map
//! factors into a factor graph together with odometry, IMU and
//! stationarity factors.

pub mod degeneracy;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod pipeline;
pub mod registration;
