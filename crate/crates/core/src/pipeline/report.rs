use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{SceneSpec, SyntheticSequence};
use super::{PipelineError, RunConfig};
use crate::degeneracy::{Axis, DegeneracyReport};
use crate::eval::{pose_to_array, MetricsReport, Trajectory};
use crate::geometry::PointCloud;
use crate::graph::{write_iteration_csv, IterationRecord};
use crate::io::{self, IoError, ScanEntry};

/// JSON schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/report.schema.json");
/// JSON schema of the run configuration.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../../schemas/run_config.schema.json");

pub const FRAMES_CSV_HEADER: &str =
    "timestamp,state,d_e,n_x,n_y,n_z,mask_x,mask_y,mask_z,stage1_reject,map_factor,zupt,residual_rms,correspondences";

/// Per-keyframe outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub timestamp: f64,
    pub state: usize,
    pub residual_rms: Option<f64>,
    pub correspondences: usize,
    pub degeneracy: Option<DegeneracyReport>,
    pub map_factor_added: bool,
    pub zupt: bool,
    pub error: Option<String>,
}

impl FrameReport {
    pub fn new(timestamp: f64, state: usize) -> Self {
        Self {
            timestamp,
            state,
            residual_rms: None,
            correspondences: 0,
            degeneracy: None,
            map_factor_added: false,
            zupt: false,
            error: None,
        }
    }

    fn csv_row(&self) -> String {
        let mut s = format!("{:.9},{}", self.timestamp, self.state);
        match &self.degeneracy {
            Some(d) => {
                let de = if d.d_e.is_finite() { format!("{:.9e}", d.d_e) } else { "inf".into() };
                let m = d.degenerate_axes;
                let bit = |a: Axis| u8::from(m.contains(a));
                let [nx, ny, nz] = d.axis_counts;
                let _ = write!(
                    s,
                    ",{de},{nx},{ny},{nz},{},{},{},{}",
                    bit(Axis::X),
                    bit(Axis::Y),
                    bit(Axis::Z),
                    u8::from(d.stage1_reject)
                );
            }
            None => s.push_str(",,,,,,,,"),
        }
        let rms = self.residual_rms.map(|r| format!("{r:.9}")).unwrap_or_default();
        let _ =
            write!(s, ",{},{},{rms},{}", u8::from(self.map_factor_added), u8::from(self.zupt), self.correspondences);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scans: usize,
    pub keyframes: usize,
    pub dropped_scans: usize,
    pub map_factors: usize,
    pub stage1_rejections: usize,
    pub zupt_frames: usize,
    pub d_e_threshold: Option<f64>,
    pub initial_residual_rms: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Estimated unit gravity direction in the world frame.
    pub gravity: [f64; 3],
    pub metrics_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub map: PointCloud,
    pub frames: Vec<FrameReport>,
    pub metrics: Option<MetricsReport>,
    pub summary: RunSummary,
    /// Iteration log of the final batch optimization.
    pub iterations: Vec<IterationRecord>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    summary: &'a RunSummary,
    metrics: &'a Option<MetricsReport>,
    frames: &'a [FrameReport],
}

impl RunOutput {
    pub fn report_json(&self) -> String {
        let r = ReportJson { summary: &self.summary, metrics: &self.metrics, frames: &self.frames };
        serde_json::to_string_pretty(&r).expect("report serializes") + "\n"
    }

    pub fn frames_csv(&self) -> String {
        let mut out = format!("{FRAMES_CSV_HEADER}\n");
        for f in &self.frames {
            out.push_str(&f.csv_row());
            out.push('\n');
        }
        out
    }
}

fn create_dir(dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.to_path_buf(), source })
}

/// Writes `trajectory.tum`, `map.pcd`, `report.json`, `frames.csv`,
/// `metrics.csv` (with metrics) and `iterations.csv` (when `verbose`).
pub fn emit_reports(output: &RunOutput, dir: &Path, verbose: bool) -> Result<(), IoError> {
    create_dir(dir)?;
    io::write_trajectory(&dir.join("trajectory.tum"), &output.trajectory)?;
    io::write_cloud_binary(&dir.join("map.pcd"), &output.map)?;
    io::write_bytes(&dir.join("report.json"), output.report_json().as_bytes())?;
    io::write_bytes(&dir.join("frames.csv"), output.frames_csv().as_bytes())?;
    if let Some(m) = &output.metrics {
        let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row());
        io::write_bytes(&dir.join("metrics.csv"), csv.as_bytes())?;
    }
    if verbose {
        let mut buf = Vec::new();
        write_iteration_csv(&mut buf, &output.iterations).expect("writing to memory");
        io::write_bytes(&dir.join("iterations.csv"), &buf)?;
    }
    Ok(())
}

/// Writes a synthetic sequence in the layout `localize` consumes, plus a
/// run configuration pointing at the ground truth.
pub fn write_sequence(seq: &SyntheticSequence, spec: &SceneSpec, dir: &Path) -> Result<(), PipelineError> {
    let scan_dir = dir.join("scans");
    create_dir(&scan_dir)?;
    io::write_cloud_binary(&dir.join("map.pcd"), &seq.map)?;
    io::write_cloud_binary(&dir.join("gt_map.pcd"), &seq.gt_map)?;
    let mut index = Vec::with_capacity(seq.scans.len());
    for (i, (t, scan)) in seq.scans.iter().enumerate() {
        let file = format!("{i:06}.pcd");
        io::write_cloud_binary(&scan_dir.join(&file), scan)?;
        index.push(ScanEntry { timestamp: *t, file });
    }
    io::write_bytes(&scan_dir.join("index.txt"), io::write_scan_index(&index).as_bytes())?;
    io::write_trajectory(&dir.join("odom.tum"), &seq.odometry)?;
    io::write_trajectory(&dir.join("gt.tum"), &seq.ground_truth)?;
    io::write_bytes(&dir.join("imu.csv"), io::write_imu_csv(&seq.imu).as_bytes())?;
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes") + "\n";
    io::write_bytes(&dir.join("scene.json"), spec_json.as_bytes())?;
    let config = RunConfig {
        initial_pose: Some(pose_to_array(&seq.initial_pose)),
        gt_trajectory: Some("gt.tum".into()),
        gt_map: Some("gt_map.pcd".into()),
        ..RunConfig::default()
    };
    io::write_bytes(&dir.join("config.json"), (config.to_json() + "\n").as_bytes())?;
    Ok(())
}
