use serde::{Deserialize, Serialize};

use super::imu::ImuSample;
use super::FactorError;

/// Stationarity test thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZuptParams {
    /// Standard deviation bound on the specific-force magnitude (m/s^2).
    pub accel_std_threshold: f64,
    /// Bound on the mean angular-rate magnitude (rad/s).
    pub gyro_mean_threshold: f64,
    /// Minimum window span (s).
    pub min_window: f64,
}

impl Default for ZuptParams {
    fn default() -> Self {
        Self { accel_std_threshold: 0.05, gyro_mean_threshold: 0.02, min_window: 0.5 }
    }
}

/// Window statistics used by the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub accel_norm_std: f64,
    pub gyro_norm_mean: f64,
}

pub fn window_stats(window: &[ImuSample]) -> WindowStats {
    let n = window.len().max(1) as f64;
    let norms: Vec<f64> = window.iter().map(|s| s.accel.norm()).collect();
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let gyro = window.iter().map(|s| s.gyro.norm()).sum::<f64>() / n;
    WindowStats { accel_norm_std: var.sqrt(), gyro_norm_mean: gyro }
}

/// True iff the window is stationary: low spread of `|a|` and low mean `|w|`.
pub fn detect_zupt(window: &[ImuSample], params: &ZuptParams) -> Result<bool, FactorError> {
    let span = match (window.first(), window.last()) {
        (Some(a), Some(b)) => b.timestamp - a.timestamp,
        _ => 0.0,
    };
    if span + 1e-9 < params.min_window {
        return Err(FactorError::WindowTooShort { span, required: params.min_window });
    }
    let s = window_stats(window);
    Ok(s.accel_norm_std < params.accel_std_threshold && s.gyro_norm_mean < params.gyro_mean_threshold)
}
