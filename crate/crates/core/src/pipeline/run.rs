use std::collections::BTreeMap;

use log::{debug, info, warn};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::report::{FrameReport, RunOutput, RunSummary};
use super::{PipelineError, PriorMap, RunConfig, SequenceInput};
use crate::degeneracy::{reference_spectrum, ThresholdCalibrator};
use crate::eval::{evaluate, Trajectory};
use crate::factors::{
    detect_zupt, pose_information, slice_samples, Factor, ImuBias, ImuSample, Preintegration, StateNode,
};
use crate::geometry::{voxel_downsample, voxel_key, PointCloud, Pose};
use crate::graph::FactorGraph;
use crate::registration::align;

/// Gravity magnitude assumed by the inertial factors (m/s^2).
const GRAVITY_MAGNITUDE: f64 = 9.81;
/// Cap on the gravity-direction weight of a stationary window.
const MAX_GRAVITY_DIR_WEIGHT: f64 = 1e8;

/// Reference data for metrics.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub trajectory: Trajectory,
    pub map: Option<PointCloud>,
}

struct Keyframe<'a> {
    timestamp: f64,
    scan: &'a PointCloud,
    /// Odometry pose (front-end frame).
    odom: Pose,
}

/// Pairs each scan with the nearest odometry pose; unmatched scans are
/// dropped with a warning.
fn associate_scans<'a>(input: &'a SequenceInput, max_dt: f64) -> (Vec<Keyframe<'a>>, usize) {
    let mut frames: Vec<Keyframe> = Vec::new();
    let mut last_odom: Option<usize> = None;
    let mut dropped = 0;
    for (t, scan) in &input.scans {
        match input.odometry.nearest(*t, max_dt) {
            Some(j) if last_odom.is_none_or(|l| j > l) => {
                last_odom = Some(j);
                frames.push(Keyframe { timestamp: *t, scan, odom: input.odometry.entries()[j].1 });
            }
            _ => {
                warn!("scan at t={t:.6} has no odometry pose within {max_dt} s; dropped");
                dropped += 1;
            }
        }
    }
    (frames, dropped)
}

fn mean_accel(samples: &[ImuSample]) -> Option<Vector3<f64>> {
    (!samples.is_empty()).then(|| samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / samples.len() as f64)
}

/// Weight of the gravity direction residual from the spread of the window's
/// accelerometer readings.
fn gravity_direction_weight(samples: &[ImuSample]) -> Option<(Vector3<f64>, f64)> {
    let mean = mean_accel(samples)?;
    let n = samples.len() as f64;
    let var: f64 = samples.iter().map(|s| (s.accel - mean).norm_squared()).sum::<f64>() / n;
    let weight = if var > 0.0 { 3.0 * n * mean.norm_squared() / var } else { MAX_GRAVITY_DIR_WEIGHT };
    Some((mean, weight.min(MAX_GRAVITY_DIR_WEIGHT)))
}

/// Voxel accumulator merging transformed scans into centroids.
#[derive(Default)]
struct VoxelMerge {
    cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)>,
}

impl VoxelMerge {
    fn add(&mut self, cloud: &PointCloud, pose: &Pose, voxel: f64) {
        for p in &cloud.points {
            let w = pose.transform_point(p);
            let e = self.cells.entry(voxel_key(&w, voxel)).or_insert((Vector3::zeros(), 0));
            e.0 += w;
            e.1 += 1;
        }
    }

    fn finish(self) -> PointCloud {
        PointCloud::new(self.cells.into_values().map(|(s, n)| s / n as f64).collect())
    }
}

/// Runs localization over a sequence against a prior map.
pub fn run(
    config: &RunConfig,
    input: &SequenceInput,
    map: &PriorMap,
    ground_truth: Option<&GroundTruth>,
) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    input.validate()?;

    let (frames, dropped_scans) = associate_scans(input, config.association_max_dt);
    let keyframes: Vec<Keyframe> = frames.into_iter().step_by(config.keyframe_stride).collect();
    if keyframes.is_empty() {
        return Err(PipelineError::NoFrames);
    }
    let use_imu = config.use_imu && input.imu.len() >= 2;
    if config.use_imu && !use_imu {
        warn!("no IMU samples; inertial factors disabled");
    }
    if use_imu {
        if let Some(ratio) = input.imu_rate_ratio() {
            if ratio < 10.0 - 1e-6 {
                return Err(PipelineError::InvalidInput(format!("IMU rate is only {ratio:.1}x the scan rate")));
            }
        }
    }
    let use_zupt = config.use_zupt && input.imu.len() >= 2;

    let downsampled: Vec<PointCloud> =
        keyframes.par_iter().map(|k| voxel_downsample(k.scan, config.scan_voxel)).collect();

    // sanity gate on the first scan
    let gate = align(&downsampled[0], &map.cloud, &map.index, &input.initial_pose, &config.registration);
    let initial_residual_rms = match &gate {
        Ok(a) if a.residual_rms < config.init_max_rms => a.residual_rms,
        Ok(a) => return Err(PipelineError::InitializationFailure { residual_rms: a.residual_rms }),
        Err(e) => {
            warn!("initial registration failed: {e}");
            return Err(PipelineError::InitializationFailure { residual_rms: f64::INFINITY });
        }
    };
    let anchor = match (&gate, config.use_map_factors) {
        (Ok(a), true) => a.pose,
        _ => input.initial_pose,
    };
    info!("initial pose registered with residual rms {initial_residual_rms:.4} m");

    let mut graph = FactorGraph::new();
    if use_imu {
        let t0 = keyframes[0].timestamp;
        if let Some(a) = mean_accel(&slice_samples(&input.imu, t0, t0 + 0.2)).filter(|a| a.norm() > 1e-6) {
            graph.set_gravity(-(anchor.rotation * a).normalize());
        }
    }

    let odom_info = pose_information(config.odometry_sigma.rotation, config.odometry_sigma.translation);
    let prior_info = pose_information(config.prior_sigma.rotation, config.prior_sigma.translation);
    let nm_info = pose_information(config.zupt_pose_sigma, config.zupt_pose_sigma);
    let zv_info = Matrix3::identity() / config.zupt_velocity_sigma.powi(2);
    let map_scale = 1.0 / config.map_sigma.powi(2);
    let mut calibrator = ThresholdCalibrator::new(config.degeneracy);
    let mut reports = Vec::with_capacity(keyframes.len());
    let mut zupt_start: Option<usize> = None;

    for (k, kf) in keyframes.iter().enumerate() {
        let mut factors = Vec::new();
        let mut report = FrameReport::new(kf.timestamp, k);
        let push = |factors: &mut Vec<Factor>, f: Result<Factor, crate::factors::FactorError>, what: &str| match f {
            Ok(f) => {
                factors.push(f);
                true
            }
            Err(e) => {
                warn!("frame {k}: {what} factor skipped: {e}");
                false
            }
        };

        let mut node = if k == 0 {
            push(&mut factors, Factor::prior(0, anchor, prior_info), "prior");
            if use_imu {
                let s = config.bias_prior_sigma;
                push(&mut factors, Factor::bias_prior(0, ImuBias::default(), s.accel, s.gyro), "bias prior");
            }
            StateNode::new(kf.timestamp, anchor)
        } else {
            let prev = &graph.states()[k - 1];
            let rel = keyframes[k - 1].odom.between(&kf.odom);
            push(&mut factors, Factor::odometry(k - 1, k, rel, odom_info), "odometry");
            let pose = prev.pose.compose(&rel);
            let dt = kf.timestamp - prev.timestamp;
            let mut node = StateNode::new(kf.timestamp, pose);
            node.velocity = (pose.translation - prev.pose.translation) / dt;
            node.bias = prev.bias;
            if use_imu {
                let samples = slice_samples(&input.imu, prev.timestamp, kf.timestamp);
                match Preintegration::integrate(&samples, &prev.bias, &config.imu_noise) {
                    Ok(pre) => {
                        push(&mut factors, Factor::imu(k - 1, k, pre, GRAVITY_MAGNITUDE), "IMU");
                        push(&mut factors, Factor::bias_walk(k - 1, k, dt, &config.imu_noise), "bias walk");
                    }
                    Err(e) => warn!("frame {k}: preintegration skipped: {e}"),
                }
            }
            node
        };

        if use_zupt {
            let window = slice_samples(&input.imu, kf.timestamp - config.zupt.min_window, kf.timestamp);
            let stationary = !window.is_empty() && detect_zupt(&window, &config.zupt).unwrap_or(false);
            report.zupt = stationary;
            if stationary {
                node.velocity = Vector3::zeros();
                push(&mut factors, Factor::zero_velocity(k, zv_info), "zero-velocity");
                match zupt_start {
                    Some(s) => {
                        push(&mut factors, Factor::no_motion(s, k, nm_info), "no-motion");
                    }
                    None => zupt_start = Some(k),
                }
                if let Some((mean, w)) = gravity_direction_weight(&window) {
                    push(&mut factors, Factor::gravity(k, mean, w, config.gravity_norm_weight), "gravity");
                }
            } else {
                zupt_start = None;
            }
        }

        if config.use_map_factors && k % config.map_factor_stride == 0 {
            match align(&downsampled[k], &map.cloud, &map.index, &node.pose, &config.registration) {
                Ok(a) => {
                    report.residual_rms = Some(a.residual_rms);
                    report.correspondences = a.correspondences.len();
                    let detected = reference_spectrum(&a, &map.reference).and_then(|r| calibrator.detect(&a, &r));
                    match detected {
                        Ok(d) => {
                            if !d.stage1_reject {
                                let info = a.hessian * map_scale;
                                report.map_factor_added =
                                    push(&mut factors, Factor::map(k, a.pose, d.mask(), &info), "map");
                            }
                            report.degeneracy = Some(d);
                        }
                        Err(e) => report.error = Some(format!("degeneracy: {e}")),
                    }
                }
                Err(e) => {
                    warn!("frame {k}: registration failed: {e}");
                    report.error = Some(format!("registration: {e}"));
                }
            }
        }

        match graph.solve_incremental(node, factors, config.window, &config.optimizer) {
            Ok(s) => debug!("frame {k}: window cost {:.6e} -> {:.6e}", s.initial_cost, s.final_cost),
            Err(e) => {
                warn!("frame {k}: window optimization failed: {e}");
                report.error.get_or_insert_with(|| format!("optimization: {e}"));
            }
        }
        reports.push(report);
    }

    let summary_opt = graph.optimize(&config.optimizer).map_err(|e| PipelineError::Numerical(e.to_string()))?;
    info!(
        "batch optimization: cost {:.6e} -> {:.6e} in {} iterations",
        summary_opt.initial_cost, summary_opt.final_cost, summary_opt.iterations
    );

    let trajectory = Trajectory::new(graph.states().iter().map(|s| (s.timestamp, s.pose)).collect())?;
    let mut merge = VoxelMerge::default();
    for (kf, state) in keyframes.iter().zip(graph.states()) {
        merge.add(kf.scan, &state.pose, config.output_voxel);
    }
    let assembled = merge.finish();

    let mut metrics_error = None;
    let metrics = ground_truth.and_then(|gt| {
        let maps = gt.map.as_ref().map(|m| (assembled.points.as_slice(), m.points.as_slice()));
        match evaluate(&trajectory, &gt.trajectory, maps, &config.eval) {
            Ok(m) => Some(m),
            Err(e) => {
                warn!("metrics unavailable: {e}");
                metrics_error = Some(e.to_string());
                None
            }
        }
    });

    let g = graph.gravity();
    let summary = RunSummary {
        scans: input.scans.len(),
        keyframes: keyframes.len(),
        dropped_scans,
        map_factors: reports.iter().filter(|r| r.map_factor_added).count(),
        stage1_rejections: reports.iter().filter(|r| r.degeneracy.as_ref().is_some_and(|d| d.stage1_reject)).count(),
        zupt_frames: reports.iter().filter(|r| r.zupt).count(),
        d_e_threshold: calibrator.threshold(),
        initial_residual_rms,
        final_cost: summary_opt.final_cost,
        iterations: summary_opt.iterations,
        converged: summary_opt.converged,
        gravity: [g.x, g.y, g.z],
        metrics_error,
    };
    Ok(RunOutput { trajectory, map: assembled, frames: reports, metrics, summary, iterations: summary_opt.log })
}
