//! Norm-constrained gravity factor.
//!
//! With the IMU z-axis up, a stationary accelerometer reads the negative of
//! the gravity direction. The measured mean specific force is rotated into
//! the world frame, `a_w = R a_mean`, and the residual is
//! `[a_w / |a_w| + g ; |g| - 1]`.

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};

use super::FactorError;
use crate::geometry::{hat, Pose};

/// Below this specific-force magnitude the direction is undefined (m/s^2).
pub const MIN_SPECIFIC_FORCE: f64 = 0.5;

pub fn gravity_error(
    pose: &Pose,
    gravity: &Vector3<f64>,
    accel_mean: &Vector3<f64>,
) -> Result<Vector4<f64>, FactorError> {
    gravity_error_jac(pose, gravity, accel_mean).map(|(r, _, _)| r)
}

/// Residual with Jacobians with respect to the pose twist (4x6, translation
/// columns zero) and the gravity vector (4x3).
pub fn gravity_error_jac(
    pose: &Pose,
    gravity: &Vector3<f64>,
    accel_mean: &Vector3<f64>,
) -> Result<(Vector4<f64>, SMatrix<f64, 4, 6>, SMatrix<f64, 4, 3>), FactorError> {
    let norm_a = accel_mean.norm();
    if !(norm_a >= MIN_SPECIFIC_FORCE) {
        return Err(FactorError::ZeroAcceleration(norm_a));
    }
    let aw = pose.rotation * accel_mean;
    let n = aw.norm();
    let u = aw / n;
    let g_norm = gravity.norm();
    let dir = u + gravity;
    let r = Vector4::new(dir.x, dir.y, dir.z, g_norm - 1.0);

    // d(u)/d(phi) for aw -> exp(phi) aw
    let du = (Matrix3::identity() - u * u.transpose()) / n * (-hat(&aw));
    let mut j_pose = SMatrix::<f64, 4, 6>::zeros();
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&du);
    let mut j_g = SMatrix::<f64, 4, 3>::zeros();
    j_g.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    if g_norm > 0.0 {
        j_g.fixed_view_mut::<1, 3>(3, 0).copy_from(&(gravity / g_norm).transpose());
    }
    Ok((r, j_pose, j_g))
}

/// Gravity direction minimizing the residual for a fixed pose.
pub fn optimal_gravity(pose: &Pose, accel_mean: &Vector3<f64>) -> Vector3<f64> {
    -(pose.rotation * accel_mean).normalize()
}
