//! File formats: PCD (ASCII/binary), ASCII PLY, TUM trajectories, IMU CSV
//! and scan index files.
//!
//! Parsers take byte slices and never panic on malformed input.

mod pcd;
mod ply;
mod text;

use std::fmt;
use std::path::{Path, PathBuf};

pub use pcd::{parse_pcd, write_pcd_ascii, write_pcd_binary};
pub use ply::parse_ply;
pub use text::{
    format_g9, format_tum_line, parse_imu_csv, parse_scan_index, parse_tum, write_imu_csv, write_scan_index, write_tum,
    ScanEntry, IMU_CSV_HEADER,
};

use crate::geometry::PointCloud;

/// Where in the input a parse error occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// 1-based line number.
    Line(usize),
    /// 0-based byte offset.
    Byte(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Byte(b) => write!(f, "byte {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{location}: {message}")]
pub struct ParseError {
    pub location: Location,
    pub message: String,
}

impl ParseError {
    pub fn line(line: usize, message: impl Into<String>) -> Self {
        Self { location: Location::Line(line), message: message.into() }
    }

    pub fn byte(byte: usize, message: impl Into<String>) -> Self {
        Self { location: Location::Byte(byte), message: message.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: ParseError },
    #[error("{}: unsupported point cloud extension (expected .pcd or .ply)", .0.display())]
    UnsupportedFormat(PathBuf),
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn with_path<T>(path: &Path, r: Result<T, ParseError>) -> Result<T, IoError> {
    r.map_err(|source| IoError::Parse { path: path.to_path_buf(), source })
}

/// Reads a `.pcd` or `.ply` point cloud, chosen by extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pcd") => with_path(path, parse_pcd(&read_bytes(path)?)),
        Some("ply") => with_path(path, parse_ply(&read_bytes(path)?)),
        _ => Err(IoError::UnsupportedFormat(path.to_path_buf())),
    }
}

pub fn write_cloud_binary(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    write_bytes(path, &write_pcd_binary(cloud))
}

pub fn read_trajectory(path: &Path) -> Result<crate::eval::Trajectory, IoError> {
    with_path(path, parse_tum(&read_bytes(path)?))
}

pub fn write_trajectory(path: &Path, traj: &crate::eval::Trajectory) -> Result<(), IoError> {
    write_bytes(path, write_tum(traj).as_bytes())
}

pub fn read_imu(path: &Path) -> Result<Vec<crate::factors::ImuSample>, IoError> {
    with_path(path, parse_imu_csv(&read_bytes(path)?))
}

pub fn read_scan_index(path: &Path) -> Result<Vec<ScanEntry>, IoError> {
    with_path(path, parse_scan_index(&read_bytes(path)?))
}
