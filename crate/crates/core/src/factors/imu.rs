//! On-manifold IMU preintegration (midpoint scheme) and the IMU factor.
//!
//! Deltas are gravity-free and expressed in the body frame of the first
//! sample. Bias Jacobians are the exact first-order derivatives of the
//! discrete integration, so re-integration with a nearby bias agrees with the
//! linear correction to second order.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use super::FactorError;
use crate::geometry::{hat, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv, Pose};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Seconds.
    pub timestamp: f64,
    /// Body angular rate (rad/s).
    pub gyro: Vector3<f64>,
    /// Body specific force (m/s^2).
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { timestamp, gyro, accel }
    }

    /// Linear interpolation between two samples.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.timestamp - a.timestamp;
        let w = if span > 0.0 { ((t - a.timestamp) / span).clamp(0.0, 1.0) } else { 0.0 };
        ImuSample { timestamp: t, gyro: a.gyro.lerp(&b.gyro, w), accel: a.accel.lerp(&b.accel, w) }
    }
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoise {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_bias_walk: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_bias_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { gyro_noise_density: 1e-3, accel_noise_density: 1e-2, gyro_bias_walk: 1e-4, accel_bias_walk: 1e-3 }
    }
}

/// Accelerometer and gyroscope bias.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn new(accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { accel, gyro }
    }
}

/// Preintegrated relative motion between the first and last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    pub dt: f64,
    pub delta_rotation: Matrix3<f64>,
    pub delta_velocity: Vector3<f64>,
    pub delta_position: Vector3<f64>,
    /// Covariance of `[rotation; velocity; position]` errors.
    pub covariance: Matrix9,
    pub bias: ImuBias,
    pub d_rot_d_bg: Matrix3<f64>,
    pub d_vel_d_ba: Matrix3<f64>,
    pub d_vel_d_bg: Matrix3<f64>,
    pub d_pos_d_ba: Matrix3<f64>,
    pub d_pos_d_bg: Matrix3<f64>,
}

/// Gravity-compensated relative motion, as returned by [`preintegrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMotion {
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    pub covariance: Matrix9,
}

impl Preintegration {
    /// Integrates `samples` (at least two, strictly increasing timestamps).
    pub fn integrate(samples: &[ImuSample], bias: &ImuBias, noise: &ImuNoise) -> Result<Self, FactorError> {
        if samples.len() < 2 {
            return Err(FactorError::TooFewSamples(samples.len()));
        }
        for w in samples.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(FactorError::NonMonotonicTimestamps { at: w[1].timestamp });
            }
        }
        let mut p = Preintegration {
            dt: 0.0,
            delta_rotation: Matrix3::identity(),
            delta_velocity: Vector3::zeros(),
            delta_position: Vector3::zeros(),
            covariance: Matrix9::zeros(),
            bias: *bias,
            d_rot_d_bg: Matrix3::zeros(),
            d_vel_d_ba: Matrix3::zeros(),
            d_vel_d_bg: Matrix3::zeros(),
            d_pos_d_ba: Matrix3::zeros(),
            d_pos_d_bg: Matrix3::zeros(),
        };
        for w in samples.windows(2) {
            p.step(&w[0], &w[1], noise);
        }
        Ok(p)
    }

    fn step(&mut self, s0: &ImuSample, s1: &ImuSample, noise: &ImuNoise) {
        let dt = s1.timestamp - s0.timestamp;
        let dt2 = dt * dt;
        let w = 0.5 * (s0.gyro + s1.gyro) - self.bias.gyro;
        let a0 = s0.accel - self.bias.accel;
        let a1 = s1.accel - self.bias.accel;

        let r0 = self.delta_rotation;
        let inc = so3_exp(&(w * dt));
        let r1 = r0 * inc;
        let jr = so3_right_jacobian(&(w * dt));

        let a_mid = 0.5 * (r0 * a0 + r1 * a1);

        // bias Jacobians of the discrete scheme
        let d_rot_d_bg_next = inc.transpose() * self.d_rot_d_bg - jr * dt;
        let d_amid_d_bg = -0.5 * (r0 * hat(&a0) * self.d_rot_d_bg + r1 * hat(&a1) * d_rot_d_bg_next);
        let d_amid_d_ba = -0.5 * (r0 + r1);

        // first-order covariance propagation on [rot; vel; pos]
        let r_mid = r0;
        let a_body = 0.5 * (a0 + inc * a1);
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&inc.transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r_mid * hat(&a_body) * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-0.5 * r_mid * hat(&a_body) * dt2));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut bg = SMatrix::<f64, 9, 3>::zeros();
        bg.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        let mut ba = SMatrix::<f64, 9, 3>::zeros();
        ba.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r_mid * dt));
        ba.fixed_view_mut::<3, 3>(6, 0).copy_from(&(0.5 * r_mid * dt2));
        let qg = noise.gyro_noise_density.powi(2) / dt;
        let qa = noise.accel_noise_density.powi(2) / dt;
        self.covariance = a * self.covariance * a.transpose() + bg * bg.transpose() * qg + ba * ba.transpose() * qa;
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;

        self.d_pos_d_ba += self.d_vel_d_ba * dt + 0.5 * d_amid_d_ba * dt2;
        self.d_pos_d_bg += self.d_vel_d_bg * dt + 0.5 * d_amid_d_bg * dt2;
        self.d_vel_d_ba += d_amid_d_ba * dt;
        self.d_vel_d_bg += d_amid_d_bg * dt;
        self.d_rot_d_bg = d_rot_d_bg_next;

        self.delta_position += self.delta_velocity * dt + 0.5 * a_mid * dt2;
        self.delta_velocity += a_mid * dt;
        self.delta_rotation = crate::geometry::orthonormalize_rotation(&r1);
        self.dt += dt;
    }

    /// Deltas re-linearized for a different bias (first order).
    pub fn corrected(&self, bias: &ImuBias) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
        let dba = bias.accel - self.bias.accel;
        let dbg = bias.gyro - self.bias.gyro;
        (
            self.delta_rotation * so3_exp(&(self.d_rot_d_bg * dbg)),
            self.delta_velocity + self.d_vel_d_ba * dba + self.d_vel_d_bg * dbg,
            self.delta_position + self.d_pos_d_ba * dba + self.d_pos_d_bg * dbg,
        )
    }

    /// Relative motion including gravity, with `gravity` given in the body
    /// frame of the first sample.
    pub fn relative_motion(&self, gravity_in_start_frame: &Vector3<f64>) -> RelativeMotion {
        RelativeMotion {
            rotation: self.delta_rotation,
            velocity: self.delta_velocity + gravity_in_start_frame * self.dt,
            position: self.delta_position + 0.5 * gravity_in_start_frame * self.dt * self.dt,
            covariance: self.covariance,
        }
    }

    /// Predicts the end state from the start state and world gravity (m/s^2).
    pub fn predict(
        &self,
        pose_i: &Pose,
        vel_i: &Vector3<f64>,
        bias: &ImuBias,
        gravity_world: &Vector3<f64>,
    ) -> (Pose, Vector3<f64>) {
        let (dr, dv, dp) = self.corrected(bias);
        let t = self.dt;
        let r = pose_i.rotation;
        let rot = crate::geometry::orthonormalize_rotation(&(r * dr));
        let vel = vel_i + gravity_world * t + r * dv;
        let pos = pose_i.translation + vel_i * t + 0.5 * gravity_world * t * t + r * dp;
        (Pose::new(rot, pos), vel)
    }
}

/// Midpoint preintegration of `imu`, gravity-compensated with `gravity`
/// expressed in the starting body frame.
pub fn preintegrate(
    imu: &[ImuSample],
    bias: &ImuBias,
    gravity: &Vector3<f64>,
    noise: &ImuNoise,
) -> Result<RelativeMotion, FactorError> {
    Ok(Preintegration::integrate(imu, bias, noise)?.relative_motion(gravity))
}

/// Jacobian blocks of the IMU residual.
#[derive(Debug, Clone)]
pub struct ImuJacobians {
    pub pose_i: SMatrix<f64, 9, 6>,
    pub vel_i: SMatrix<f64, 9, 3>,
    pub bias_i: SMatrix<f64, 9, 6>,
    pub pose_j: SMatrix<f64, 9, 6>,
    pub vel_j: SMatrix<f64, 9, 3>,
    /// With respect to the unit gravity direction variable.
    pub gravity: SMatrix<f64, 9, 3>,
}

/// IMU residual `[r_rot; r_vel; r_pos]` between two states.
///
/// World gravity is `gravity_magnitude * gravity_dir`. The bias of state `i`
/// is used for the first-order correction.
#[allow(clippy::too_many_arguments)]
pub fn imu_error_jac(
    pre: &Preintegration,
    pose_i: &Pose,
    vel_i: &Vector3<f64>,
    bias_i: &ImuBias,
    pose_j: &Pose,
    vel_j: &Vector3<f64>,
    gravity_dir: &Vector3<f64>,
    gravity_magnitude: f64,
) -> (Vector9, ImuJacobians) {
    let t = pre.dt;
    let g = gravity_dir * gravity_magnitude;
    let (dr, dv, dp) = pre.corrected(bias_i);
    let ri_t = pose_i.rotation.transpose();
    let rj = pose_j.rotation;

    let e = dr.transpose() * ri_t * rj;
    let r_rot = so3_log(&e);
    let u = vel_j - vel_i - g * t;
    let r_vel = ri_t * u - dv;
    let w = pose_j.translation - pose_i.translation - vel_i * t - 0.5 * g * t * t;
    let r_pos = ri_t * w - dp;

    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    r.fixed_rows_mut::<3>(6).copy_from(&r_pos);

    let jr_inv = so3_right_jacobian_inv(&r_rot);
    let dbg = bias_i.gyro - pre.bias.gyro;
    let corr = pre.d_rot_d_bg * dbg;

    let mut pose_i_j = SMatrix::<f64, 9, 6>::zeros();
    pose_i_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * rj.transpose()));
    pose_i_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(ri_t * hat(&u)));
    pose_i_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&(ri_t * (hat(&w) + hat(&pose_i.translation))));
    pose_i_j.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-ri_t));

    let mut pose_j_j = SMatrix::<f64, 9, 6>::zeros();
    pose_j_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr_inv * rj.transpose()));
    pose_j_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ri_t * hat(&pose_j.translation)));
    pose_j_j.fixed_view_mut::<3, 3>(6, 3).copy_from(&ri_t);

    let mut vel_i_j = SMatrix::<f64, 9, 3>::zeros();
    vel_i_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ri_t));
    vel_i_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ri_t * t));

    let mut vel_j_j = SMatrix::<f64, 9, 3>::zeros();
    vel_j_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&ri_t);

    // bias ordering [accel; gyro]
    let mut bias_j = SMatrix::<f64, 9, 6>::zeros();
    let d_rot = -jr_inv * e.transpose() * so3_right_jacobian(&corr) * pre.d_rot_d_bg;
    bias_j.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_rot);
    bias_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-pre.d_vel_d_ba));
    bias_j.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-pre.d_vel_d_bg));
    bias_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-pre.d_pos_d_ba));
    bias_j.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-pre.d_pos_d_bg));

    let mut grav = SMatrix::<f64, 9, 3>::zeros();
    grav.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ri_t * gravity_magnitude * t));
    grav.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ri_t * 0.5 * gravity_magnitude * t * t));

    (
        r,
        ImuJacobians {
            pose_i: pose_i_j,
            vel_i: vel_i_j,
            bias_i: bias_j,
            pose_j: pose_j_j,
            vel_j: vel_j_j,
            gravity: grav,
        },
    )
}

/// Samples covering `[t0, t1]`, with interpolated end points.
pub fn slice_samples(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let mut out = Vec::new();
    if samples.len() < 2 || t1 <= t0 {
        return out;
    }
    let start = samples.partition_point(|s| s.timestamp <= t0);
    let end = samples.partition_point(|s| s.timestamp < t1);
    if start == 0 || end >= samples.len() {
        return out;
    }
    out.push(ImuSample::lerp(&samples[start - 1], &samples[start], t0));
    out.extend(samples[start..end].iter().copied().filter(|s| s.timestamp > t0 && s.timestamp < t1));
    out.push(ImuSample::lerp(&samples[end - 1], &samples[end], t1));
    out
}
