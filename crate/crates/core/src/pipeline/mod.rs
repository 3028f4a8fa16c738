//! End-to-end localization: data loading, per-frame registration with
//! degeneracy gating, graph construction and optimization, map assembly and
//! report emission.

mod config;
mod report;
mod run;
pub mod scene;

use std::path::{Path, PathBuf};

pub use config::{apply_override, BiasSigma, PoseSigma, RunConfig};
pub use report::{
    emit_reports, write_sequence, FrameReport, RunOutput, RunSummary, FRAMES_CSV_HEADER, REPORT_SCHEMA,
    RUN_CONFIG_SCHEMA,
};
pub use run::{run, GroundTruth};
pub use scene::{synth, SceneKind, SceneSpec, SyntheticSequence};

use crate::degeneracy::ReferenceGrid;
use crate::eval::Trajectory;
use crate::factors::ImuSample;
use crate::geometry::{estimate_normals_with_index, voxel_downsample, PointCloud, Pose, SpatialIndex};
use crate::io::{self, IoError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("initial pose does not register against the map (residual rms {residual_rms:.3} m)")]
    InitializationFailure { residual_rms: f64 },
    #[error("no scan could be associated with odometry")]
    NoFrames,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::eval::EvalError),
}

/// Downsampled reference cloud with normals and an index, in the world frame.
#[derive(Debug, Clone)]
pub struct PriorMap {
    pub cloud: PointCloud,
    pub index: SpatialIndex,
    /// Cell sums for the degeneracy reference Hessian.
    pub reference: ReferenceGrid,
    pub voxel: f64,
}

/// Cell size of the reference Hessian grid (m).
pub const REFERENCE_CELL: f64 = 0.5;

impl PriorMap {
    /// Voxel-downsamples, estimates normals and indexes `cloud`.
    pub fn build(cloud: &PointCloud, voxel: f64) -> Result<Self, PipelineError> {
        if !(voxel.is_finite() && voxel > 0.0) {
            return Err(PipelineError::Config("map voxel must be positive".into()));
        }
        let down = voxel_downsample(cloud, voxel);
        let index = SpatialIndex::build(&down).map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
        let k = crate::geometry::DEFAULT_NORMAL_NEIGHBORS.min(down.len());
        let cloud = if k < 3 {
            // too sparse for any plane fit: every normal is marked invalid
            let n = down.len();
            PointCloud::with_normals(down.points, vec![nalgebra::Vector3::zeros(); n])
        } else {
            estimate_normals_with_index(&down, &index, k).map_err(|e| PipelineError::InvalidInput(e.to_string()))?.0
        };
        let reference = ReferenceGrid::build(&cloud, REFERENCE_CELL);
        Ok(Self { cloud, index, reference, voxel })
    }
}

pub fn load_map(path: &Path, voxel: f64) -> Result<PriorMap, PipelineError> {
    let cloud = io::read_cloud(path)?;
    if cloud.is_empty() {
        return Err(PipelineError::InvalidInput(format!("{}: point cloud is empty", path.display())));
    }
    PriorMap::build(&cloud, voxel)
}

/// Everything the run consumes besides the map.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    /// Scans in the sensor frame, by strictly increasing timestamp.
    pub scans: Vec<(f64, PointCloud)>,
    /// Front-end odometry in its own frame.
    pub odometry: Trajectory,
    pub imu: Vec<ImuSample>,
    /// World pose of the first odometry entry.
    pub initial_pose: Pose,
}

impl SequenceInput {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.scans.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(PipelineError::InvalidInput("scan timestamps must be strictly increasing".into()));
        }
        if self.imu.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(PipelineError::InvalidInput("IMU timestamps must be strictly increasing".into()));
        }
        if !self.initial_pose.is_valid(1e-6) {
            return Err(PipelineError::InvalidInput("initial pose is not a valid rigid transform".into()));
        }
        Ok(())
    }

    /// IMU rate divided by scan rate, from the median sample spacing.
    pub fn imu_rate_ratio(&self) -> Option<f64> {
        let median = |mut d: Vec<f64>| {
            d.sort_by(f64::total_cmp);
            d.get(d.len() / 2).copied()
        };
        let scan_dt = median(self.scans.windows(2).map(|w| w[1].0 - w[0].0).collect())?;
        let imu_dt = median(self.imu.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect())?;
        Some(scan_dt / imu_dt)
    }
}

/// Loads scans listed in `<scan_dir>/index.txt` plus odometry and IMU files.
pub fn load_sequence(
    scan_dir: &Path,
    odom: &Path,
    imu: Option<&Path>,
    initial_pose: Option<Pose>,
) -> Result<SequenceInput, PipelineError> {
    let index = io::read_scan_index(&scan_dir.join("index.txt"))?;
    let scans = index
        .iter()
        .map(|e| Ok((e.timestamp, io::read_cloud(&scan_dir.join(&e.file))?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    let odometry = io::read_trajectory(odom)?;
    let imu = match imu {
        Some(p) => io::read_imu(p)?,
        None => Vec::new(),
    };
    let initial_pose = match initial_pose {
        Some(p) => p,
        None => odometry.entries().first().map(|e| e.1).ok_or(PipelineError::NoFrames)?,
    };
    let input = SequenceInput { scans, odometry, imu, initial_pose };
    input.validate()?;
    Ok(input)
}

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
