//! Pose-only factors: odometry, no-motion, prior and the masked map factor.
//!
//! All poses are perturbed on the left (`exp(xi) * T`); Jacobians are with
//! respect to those world-frame twists.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::degeneracy::{Axis, AxisMask};
use crate::geometry::{log_map, se3_left_jacobian_inv, Pose};

/// `r = log(measured^-1 * pose_i^-1 * pose_j)`.
pub fn odometry_error(pose_i: &Pose, pose_j: &Pose, measured_relative: &Pose) -> Vector6<f64> {
    log_map(&measured_relative.inverse().compose(&pose_i.between(pose_j))).to_vector()
}

/// Residual with Jacobians `(d r / d xi_i, d r / d xi_j)`.
pub fn odometry_error_jac(
    pose_i: &Pose,
    pose_j: &Pose,
    measured_relative: &Pose,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let a = measured_relative.inverse().compose(&pose_i.inverse());
    let e = a.compose(pose_j);
    let r = log_map(&e);
    let jj = se3_left_jacobian_inv(&r) * a.adjoint();
    (r.to_vector(), -jj, jj)
}

/// `r = log(pose_i^-1 * pose_j)`: the two poses should coincide.
pub fn no_motion_error(pose_i: &Pose, pose_j: &Pose) -> Vector6<f64> {
    odometry_error(pose_i, pose_j, &Pose::identity())
}

pub fn no_motion_error_jac(pose_i: &Pose, pose_j: &Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    odometry_error_jac(pose_i, pose_j, &Pose::identity())
}

/// `r = log(pose * prior^-1)`, a world-frame twist.
pub fn prior_error_jac(pose: &Pose, prior: &Pose) -> (Vector6<f64>, Matrix6<f64>) {
    let r = log_map(&pose.compose(&prior.inverse()));
    (r.to_vector(), se3_left_jacobian_inv(&r))
}

/// Rows of the 6-vector kept under `mask` (masked axes drop translation rows).
pub fn unmasked_rows(mask: AxisMask) -> Vec<usize> {
    let mut rows = vec![0, 1, 2];
    for axis in Axis::ALL {
        if !mask.contains(axis) {
            rows.push(3 + axis.index());
        }
    }
    rows
}

/// Map factor residual.
///
/// The full residual is the world-frame twist `log(pose * map_pose^-1)`, the
/// same coordinates the registration Hessian is expressed in; translation
/// rows of masked (world) axes are removed.
pub fn map_error(pose: &Pose, map_pose: &Pose, mask: AxisMask) -> DVector<f64> {
    map_error_jac(pose, map_pose, mask).0
}

pub fn map_error_jac(pose: &Pose, map_pose: &Pose, mask: AxisMask) -> (DVector<f64>, DMatrix<f64>) {
    let (r, j) = prior_error_jac(pose, map_pose);
    let rows = unmasked_rows(mask);
    let rr = DVector::from_iterator(rows.len(), rows.iter().map(|&i| r[i]));
    let jr = DMatrix::from_fn(rows.len(), 6, |i, c| j[(rows[i], c)]);
    (rr, jr)
}

/// Information of the map factor: the registration Hessian with masked
/// rows and columns deleted.
pub fn map_information(hessian: &Matrix6<f64>, mask: AxisMask) -> DMatrix<f64> {
    let rows = unmasked_rows(mask);
    DMatrix::from_fn(rows.len(), rows.len(), |i, j| hessian[(rows[i], rows[j])])
}
