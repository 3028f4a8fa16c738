//! Rigid transforms on SE(3) with a rotation-matrix representation.
//!
//! Tangent vectors are ordered `[rotation; translation]` everywhere in the
//! crate. Pose perturbations are applied on the left, `exp(xi) * T`, so the
//! perturbation lives in the world frame.

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Mul;

const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the Jacobian coefficients switch to their Taylor series.
const SERIES_ANGLE: f64 = 1e-4;

/// Skew-symmetric (cross-product) matrix of `v`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`] for angles in `[0, pi]`.
///
/// At exactly `pi` the axis is extracted from `R + I` and oriented so that its
/// leading nonzero component is positive.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < SMALL_ANGLE {
        // sin(theta)/theta ~ 1 - theta^2/6
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if PI - theta > 1e-6 {
        return vee * (0.5 * theta / theta.sin());
    }
    // Near pi: R = I + 2 a a^T - 2 I (for theta = pi), so a a^T = (R + I) / 2.
    let b = (r + Matrix3::identity()) * 0.5;
    let col = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]).then(j.cmp(&i))).unwrap_or(0);
    let mut axis: Vector3<f64> = b.column(col).into();
    axis /= axis.norm();
    if theta < PI {
        // Use the (small) antisymmetric part to pick the sign.
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
    } else if let Some(lead) = axis.iter().find(|c| c.abs() > 1e-12) {
        if *lead < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SERIES_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_left_jacobian`].
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Right Jacobian of SO(3): `Jr(phi) = Jl(-phi)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-phi)
}

pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian_inv(&-phi)
}

/// The `Q` block coupling rotation and translation in the SE(3) left Jacobian.
fn se3_q(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        (1.0 / 6.0 - theta2 / 120.0, 1.0 / 24.0 - theta2 / 720.0, 1.0 / 120.0 - theta2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let theta4 = theta2 * theta2;
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta4 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5 + (pr + rp + prp) * c1 + (pp * r + rp * p - prp * 3.0) * c2 + (prp * p + pp * r * p) * c3
}

/// Tangent vector of SE(3), ordered `[rotation; translation]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    /// Rotation vector (radians).
    pub rotation: Vector3<f64>,
    /// Translational part (meters).
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Builds a pose from a (not necessarily normalized) quaternion given as
    /// `(x, y, z, w)`.
    pub fn from_quaternion(t: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Self::new(q.to_rotation_matrix().into_inner(), t)
    }

    /// Hamilton quaternion `(x, y, z, w)` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn exp(xi: &Twist) -> Self {
        exp_map(xi)
    }

    pub fn log(&self) -> Twist {
        log_map(self)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt * other.rotation, rt * (other.translation - self.translation))
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `exp(xi) * self`.
    pub fn retract_left(&self, xi: &Twist) -> Self {
        let mut p = exp_map(xi).compose(self);
        p.orthonormalize();
        p
    }

    /// Adjoint in `[rotation; translation]` ordering:
    /// `exp(Ad * xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    /// Projects the rotation block back onto SO(3) (polar decomposition).
    pub fn orthonormalize(&mut self) {
        self.rotation = orthonormalize_rotation(&self.rotation);
    }

    /// Checks the rotation block against the group invariants.
    pub fn is_valid(&self, tol: f64) -> bool {
        let err = self.rotation.transpose() * self.rotation - Matrix3::identity();
        err.iter().all(|e| e.abs() <= tol)
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }

    /// Rotation angle (radians) and translation norm of `self^-1 * other`.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.between(other);
        (so3_log(&d.rotation).norm(), d.translation.norm())
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.rotation - other.rotation).amax() <= tol && (self.translation - other.translation).amax() <= tol
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Matrix3::identity(),
    };
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// SE(3) exponential.
pub fn exp_map(xi: &Twist) -> Pose {
    let r = so3_exp(&xi.rotation);
    let v = so3_left_jacobian(&xi.rotation);
    Pose::new(r, v * xi.translation)
}

/// SE(3) logarithm.
pub fn log_map(p: &Pose) -> Twist {
    let phi = so3_log(&p.rotation);
    let rho = so3_left_jacobian_inv(&phi) * p.translation;
    Twist::new(phi, rho)
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(a: &Pose) -> Pose {
    a.inverse()
}

pub fn between(a: &Pose, b: &Pose) -> Pose {
    a.between(b)
}

/// Left Jacobian of SE(3) in `[rotation; translation]` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let jl = so3_left_jacobian(&xi.rotation);
    let q = se3_q(&xi.rotation, &xi.translation);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    j
}

/// Inverse of [`se3_left_jacobian`], so that
/// `log(exp(d) * T) ~ log(T) + Jl^-1(log T) * d`.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jl_inv = so3_left_jacobian_inv(&xi.rotation);
    let q = se3_q(&xi.rotation, &xi.translation);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-jl_inv * q * jl_inv));
    j
}

/// Rotation about z by `yaw` radians.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
