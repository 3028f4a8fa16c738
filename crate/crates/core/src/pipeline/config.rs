use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::degeneracy::DegeneracyParams;
use crate::eval::EvalParams;
use crate::factors::{ImuNoise, ZuptParams};
use crate::graph::OptimizerParams;
use crate::registration::RegistrationParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSigma {
    /// rad
    pub rotation: f64,
    /// m
    pub translation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSigma {
    /// m/s^2
    pub accel: f64,
    /// rad/s
    pub gyro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub registration: RegistrationParams,
    pub degeneracy: DegeneracyParams,
    pub optimizer: OptimizerParams,
    pub zupt: ZuptParams,
    pub eval: EvalParams,
    pub imu_noise: ImuNoise,
    /// Every n-th associated scan becomes a state.
    pub keyframe_stride: usize,
    /// Every n-th keyframe is registered against the map.
    pub map_factor_stride: usize,
    /// States re-optimized after each keyframe (0 = all).
    pub window: usize,
    /// Voxel size for the prior map (m).
    pub map_voxel: f64,
    /// Voxel size applied to each scan before registration (m).
    pub scan_voxel: f64,
    /// Voxel size of the assembled output map (m).
    pub output_voxel: f64,
    /// Scan-to-odometry association tolerance (s).
    pub association_max_dt: f64,
    /// Residual RMS the first scan must reach at the initial pose (m).
    pub init_max_rms: f64,
    /// Per-frame odometry noise.
    pub odometry_sigma: PoseSigma,
    /// Map-factor information is the registration Hessian over this squared (m).
    pub map_sigma: f64,
    /// Anchor on the first state.
    pub prior_sigma: PoseSigma,
    pub zupt_velocity_sigma: f64,
    pub zupt_pose_sigma: f64,
    /// Weight on the gravity norm residual.
    pub gravity_norm_weight: f64,
    /// Prior on the first state's biases.
    pub bias_prior_sigma: BiasSigma,
    pub use_map_factors: bool,
    pub use_imu: bool,
    pub use_zupt: bool,
    /// World pose of the first scan `[tx, ty, tz, qx, qy, qz, qw]`; when
    /// absent the first odometry pose is taken as already in the map frame.
    pub initial_pose: Option<[f64; 7]>,
    /// Reference data for metrics, relative to the config file.
    pub gt_trajectory: Option<PathBuf>,
    pub gt_map: Option<PathBuf>,
    /// Also write the optimizer iteration log.
    pub verbose: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationParams::default(),
            degeneracy: DegeneracyParams::default(),
            optimizer: OptimizerParams::default(),
            zupt: ZuptParams::default(),
            eval: EvalParams::default(),
            imu_noise: ImuNoise::default(),
            keyframe_stride: 1,
            map_factor_stride: 1,
            window: 10,
            map_voxel: 0.1,
            scan_voxel: 0.1,
            output_voxel: 0.05,
            association_max_dt: 0.01,
            init_max_rms: 0.5,
            odometry_sigma: PoseSigma { rotation: 0.01, translation: 0.05 },
            map_sigma: 0.05,
            prior_sigma: PoseSigma { rotation: 1e-3, translation: 1e-3 },
            zupt_velocity_sigma: 0.01,
            zupt_pose_sigma: 1e-4,
            gravity_norm_weight: 1e6,
            bias_prior_sigma: BiasSigma { accel: 0.1, gyro: 0.01 },
            use_map_factors: true,
            use_imu: true,
            use_zupt: true,
            initial_pose: None,
            gt_trajectory: None,
            gt_map: None,
            verbose: false,
            output_dir: None,
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl RunConfig {
    /// Parses JSON, applies `key.path=value` overrides, then validates.
    pub fn from_json(bytes: &[u8], overrides: &[String]) -> Result<Self, PipelineError> {
        let mut value: Value = serde_json::from_slice(bytes).map_err(|e| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = self.registration.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.optimizer.validate() {
            return bad(e.to_string());
        }
        let d = &self.degeneracy;
        if !(d.s_thres > 1.0 && d.s_thres.is_finite()) || !positive(d.calibration_factor) {
            return bad("degeneracy.s_thres must exceed 1 and calibration_factor be positive".into());
        }
        if d.d_e_threshold.is_some_and(|t| !(t >= 0.0)) {
            return bad("degeneracy.d_e_threshold must be non-negative".into());
        }
        let z = &self.zupt;
        if !(positive(z.accel_std_threshold) && positive(z.gyro_mean_threshold) && positive(z.min_window)) {
            return bad("zupt thresholds must be positive".into());
        }
        let e = &self.eval;
        if !(positive(e.max_dt) && positive(e.rpe_distance) && positive(e.map_threshold) && e.rpe_delta >= 1) {
            return bad("eval parameters must be positive".into());
        }
        let n = &self.imu_noise;
        if ![n.gyro_noise_density, n.accel_noise_density, n.gyro_bias_walk, n.accel_bias_walk].into_iter().all(positive)
        {
            return bad("imu_noise densities must be positive".into());
        }
        if self.keyframe_stride == 0 || self.map_factor_stride == 0 {
            return bad("strides must be at least 1".into());
        }
        let pos = [
            ("map_voxel", self.map_voxel),
            ("scan_voxel", self.scan_voxel),
            ("output_voxel", self.output_voxel),
            ("association_max_dt", self.association_max_dt),
            ("init_max_rms", self.init_max_rms),
            ("map_sigma", self.map_sigma),
            ("zupt_velocity_sigma", self.zupt_velocity_sigma),
            ("zupt_pose_sigma", self.zupt_pose_sigma),
            ("gravity_norm_weight", self.gravity_norm_weight),
        ];
        for (name, v) in pos {
            if !positive(v) {
                return bad(format!("{name} must be positive"));
            }
        }
        let b = self.bias_prior_sigma;
        if !(positive(b.accel) && positive(b.gyro)) {
            return bad("bias_prior_sigma entries must be positive".into());
        }
        for (name, s) in [("odometry_sigma", self.odometry_sigma), ("prior_sigma", self.prior_sigma)] {
            if !(positive(s.rotation) && positive(s.translation)) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        if let Some(p) = self.initial_pose {
            let qn = (p[3] * p[3] + p[4] * p[4] + p[5] * p[5] + p[6] * p[6]).sqrt();
            if !p.iter().all(|v| v.is_finite()) || !(qn > 1e-9) {
                return bad("initial_pose must be finite with a nonzero quaternion".into());
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c` in a JSON object. The value is parsed as JSON when possible,
/// otherwise taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), PipelineError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override '{assignment}' lacks '='")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(PipelineError::Config(format!("invalid override path '{path}'")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => return Err(PipelineError::Config(format!("override path '{path}' crosses a non-object"))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
