//! Scan-to-map point-to-plane alignment.
//!
//! Residual convention: `r = n^T (T p - q)` for a scan point `p` (body frame),
//! its matched map point `q` and the map normal `n`. The pose is perturbed on
//! the left, `exp(xi) * T`, which gives the Jacobian row
//! `[ (T p x n)^T, n^T ]` in `[rotation; translation]` order.

use nalgebra::{Cholesky, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, Pose, SpatialIndex, Twist};

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error("no scan point found a map neighbor within range")]
    NoCorrespondences,
    #[error("map cloud carries no normals")]
    MissingNormals,
    #[error("invalid registration parameters: {0}")]
    InvalidParams(&'static str),
}

/// A scan point paired with the plane of its nearest map point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Scan point in the body frame.
    pub source: Vector3<f64>,
    /// Matched map point in the world frame.
    pub target: Vector3<f64>,
    /// Unit normal of the matched map point.
    pub normal: Vector3<f64>,
    /// Signed point-to-plane distance at the pose the match was made for.
    pub residual: f64,
}

impl Correspondence {
    /// Residual and Jacobian row at `pose`.
    #[inline]
    pub fn linearize(&self, pose: &Pose) -> (f64, Vector6<f64>) {
        let tp = pose.transform_point(&self.source);
        let r = self.normal.dot(&(tp - self.target));
        let c = tp.cross(&self.normal);
        (r, Vector6::new(c.x, c.y, c.z, self.normal.x, self.normal.y, self.normal.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    /// Maximum distance between a transformed scan point and its map neighbor (m).
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Stop once the norm of the pose update falls below this.
    pub convergence_threshold: f64,
    /// Huber kernel width (m).
    pub kernel_width: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self { max_correspondence_distance: 1.0, max_iterations: 30, convergence_threshold: 1e-6, kernel_width: 0.1 }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if !(self.max_correspondence_distance > 0.0) {
            return Err(RegistrationError::InvalidParams("max_correspondence_distance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(RegistrationError::InvalidParams("max_iterations must be positive"));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(RegistrationError::InvalidParams("convergence_threshold must be positive"));
        }
        if !(self.kernel_width > 0.0) {
            return Err(RegistrationError::InvalidParams("kernel_width must be positive"));
        }
        Ok(())
    }
}

/// One Levenberg trial inside [`align`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignIteration {
    /// Robust cost at the current pose.
    pub cost_before: f64,
    /// Robust cost at the trial pose, same correspondences.
    pub cost_after: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct AlignResult {
    /// World-from-body pose.
    pub pose: Pose,
    /// Unit-weight `J^T J` at `pose`, ordered `[rotation; translation]`.
    pub hessian: Matrix6<f64>,
    pub residual_rms: f64,
    pub correspondences: Vec<Correspondence>,
    /// Number of linearizations performed.
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<AlignIteration>,
}

/// Matches each transformed scan point to its nearest map point.
///
/// Points whose neighbor is farther than `max_dist` or lacks a valid normal
/// are dropped; output order follows scan order.
pub fn find_correspondences(
    scan: &PointCloud,
    map: &PointCloud,
    map_index: &SpatialIndex,
    pose: &Pose,
    max_dist: f64,
) -> Result<Vec<Correspondence>, RegistrationError> {
    if !map.has_normals() {
        return Err(RegistrationError::MissingNormals);
    }
    let max_sq = max_dist * max_dist;
    let corrs: Vec<Correspondence> = scan
        .points
        .par_iter()
        .map(|p| {
            let tp = pose.transform_point(p);
            let nn = map_index.nearest(&tp);
            if nn.dist_sq > max_sq {
                return None;
            }
            let normal = map.normal(nn.index)?;
            let target = map.points[nn.index];
            Some(Correspondence { source: *p, target, normal, residual: normal.dot(&(tp - target)) })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if corrs.is_empty() {
        return Err(RegistrationError::NoCorrespondences);
    }
    Ok(corrs)
}

#[inline]
fn huber(r: f64, k: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= k {
        (0.5 * r * r, 1.0)
    } else {
        (k * (a - 0.5 * k), k / a)
    }
}

/// Robust cost of `corrs` at `pose` (fixed associations).
pub fn robust_cost(corrs: &[Correspondence], pose: &Pose, kernel_width: f64) -> f64 {
    corrs.iter().map(|c| huber(c.normal.dot(&(pose.transform_point(&c.source) - c.target)), kernel_width).0).sum()
}

/// Gauss-Newton system of the Huber-weighted point-to-plane cost.
///
/// Returns `(H, b, cost)` with `H = sum w J^T J`, `b = sum w J^T r`, where `b`
/// is the gradient of the cost with respect to a left perturbation. Sums are
/// accumulated in correspondence order.
pub fn assemble_system(corrs: &[Correspondence], pose: &Pose, kernel_width: f64) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut cost = 0.0;
    for c in corrs {
        let (r, j) = c.linearize(pose);
        let (rho, w) = huber(r, kernel_width);
        cost += rho;
        accumulate_outer(&mut h, &j, w);
        b += j * (w * r);
    }
    (h, b, cost)
}

/// Unit-weight `J^T J`; this is the matrix the degeneracy analysis reads.
pub fn unit_hessian(corrs: &[Correspondence], pose: &Pose) -> Matrix6<f64> {
    let mut h = Matrix6::zeros();
    for c in corrs {
        let (_, j) = c.linearize(pose);
        accumulate_outer(&mut h, &j, 1.0);
    }
    h
}

#[inline]
fn accumulate_outer(h: &mut Matrix6<f64>, j: &Vector6<f64>, w: f64) {
    for col in 0..6 {
        let wj = w * j[col];
        for row in col..6 {
            h[(row, col)] += j[row] * wj;
        }
    }
    for col in 0..6 {
        for row in 0..col {
            h[(row, col)] = h[(col, row)];
        }
    }
}

fn rms(corrs: &[Correspondence], pose: &Pose) -> f64 {
    let ss: f64 = corrs
        .iter()
        .map(|c| {
            let r = c.normal.dot(&(pose.transform_point(&c.source) - c.target));
            r * r
        })
        .sum();
    (ss / corrs.len() as f64).sqrt()
}

/// Aligns `scan` to the map starting from `init`.
///
/// Gauss-Newton with Levenberg damping; correspondences are re-associated at
/// every accepted pose.
pub fn align(
    scan: &PointCloud,
    map: &PointCloud,
    map_index: &SpatialIndex,
    init: &Pose,
    params: &RegistrationParams,
) -> Result<AlignResult, RegistrationError> {
    params.validate()?;
    let max_dist = params.max_correspondence_distance;
    let mut pose = *init;
    let mut corrs = find_correspondences(scan, map, map_index, &pose, max_dist)?;
    let mut damping = 1e-6;
    let mut log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut relinearize = true;
    let (mut h, mut b, mut cost) = (Matrix6::zeros(), Vector6::zeros(), 0.0);

    for _ in 0..params.max_iterations {
        if relinearize {
            (h, b, cost) = assemble_system(&corrs, &pose, params.kernel_width);
            iterations += 1;
        }
        let scale = h.trace().max(1e-12) / 6.0;
        let damped = h + Matrix6::identity() * (damping * scale);
        let Some(chol) = Cholesky::new(damped) else {
            damping *= 10.0;
            relinearize = false;
            continue;
        };
        let delta = -chol.solve(&b);
        let step = Twist::from_vector(&delta);
        let trial = pose.retract_left(&step);
        let trial_cost = robust_cost(&corrs, &trial, params.kernel_width);
        let step_norm = delta.norm();
        let accepted = trial_cost <= cost;
        log.push(AlignIteration { cost_before: cost, cost_after: trial_cost, damping, step_norm, accepted });
        if accepted {
            pose = trial;
            damping = (damping * 0.5).max(1e-12);
            if step_norm < params.convergence_threshold {
                converged = true;
                break;
            }
            corrs = find_correspondences(scan, map, map_index, &pose, max_dist)?;
            relinearize = true;
        } else {
            damping *= 10.0;
            relinearize = false;
            if damping > 1e8 || step_norm < params.convergence_threshold {
                // Numerically at a minimum of the current association.
                converged = step_norm < params.convergence_threshold;
                break;
            }
        }
    }

    let corrs = find_correspondences(scan, map, map_index, &pose, max_dist)?;
    let corrs: Vec<Correspondence> = corrs
        .into_iter()
        .map(|mut c| {
            c.residual = c.normal.dot(&(pose.transform_point(&c.source) - c.target));
            c
        })
        .collect();
    Ok(AlignResult {
        hessian: unit_hessian(&corrs, &pose),
        residual_rms: rms(&corrs, &pose),
        pose,
        correspondences: corrs,
        iterations,
        converged,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_map() -> (PointCloud, SpatialIndex) {
        let mut pts = Vec::new();
        for i in -10..=10 {
            for j in -10..=10 {
                pts.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let n = pts.len();
        let cloud = PointCloud::with_normals(pts, vec![Vector3::z(); n]);
        let idx = SpatialIndex::build(&cloud).unwrap();
        (cloud, idx)
    }

    #[test]
    fn self_match_has_zero_residuals() {
        let (map, idx) = plane_map();
        let scan = PointCloud::new(map.points.clone());
        let corrs = find_correspondences(&scan, &map, &idx, &Pose::identity(), 0.1).unwrap();
        assert_eq!(corrs.len(), scan.len());
        assert!(corrs.iter().all(|c| c.residual == 0.0));
    }

    #[test]
    fn far_scan_has_no_correspondences() {
        let (map, idx) = plane_map();
        let scan = PointCloud::new(map.points.clone());
        let pose = Pose::from_translation(Vector3::new(10.0, 0.0, 0.0));
        assert!(matches!(
            find_correspondences(&scan, &map, &idx, &pose, 0.5),
            Err(RegistrationError::NoCorrespondences)
        ));
    }

    #[test]
    fn offset_along_normal_is_the_residual() {
        let (map, idx) = plane_map();
        let scan = PointCloud::new(map.points.iter().map(|p| p + Vector3::new(0.0, 0.0, 0.05)).collect());
        let corrs = find_correspondences(&scan, &map, &idx, &Pose::identity(), 0.5).unwrap();
        assert!(corrs.iter().all(|c| (c.residual - 0.05).abs() < 1e-9));
    }

    #[test]
    fn missing_normals_rejected() {
        let cloud = PointCloud::new(vec![Vector3::zeros()]);
        let idx = SpatialIndex::build(&cloud).unwrap();
        assert!(matches!(
            find_correspondences(&cloud, &cloud, &idx, &Pose::identity(), 1.0),
            Err(RegistrationError::MissingNormals)
        ));
    }

    #[test]
    fn zero_residuals_give_zero_gradient() {
        let (map, idx) = plane_map();
        let scan = PointCloud::new(map.points.clone());
        let corrs = find_correspondences(&scan, &map, &idx, &Pose::identity(), 0.1).unwrap();
        let (h, b, cost) = assemble_system(&corrs, &Pose::identity(), 0.1);
        assert_eq!(b, Vector6::zeros());
        assert_eq!(cost, 0.0);
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn single_correspondence_jacobian() {
        let c =
            Correspondence { source: Vector3::zeros(), target: Vector3::zeros(), normal: Vector3::z(), residual: 0.0 };
        let (_, j) = c.linearize(&Pose::identity());
        assert_eq!(j.fixed_rows::<3>(3).into_owned(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(j.fixed_rows::<3>(0).into_owned(), Vector3::zeros());
    }

    #[test]
    fn huber_weights() {
        assert_eq!(huber(0.05, 0.1), (0.5 * 0.05 * 0.05, 1.0));
        let (rho, w) = huber(-0.4, 0.1);
        assert!((rho - 0.1 * (0.4 - 0.05)).abs() < 1e-15);
        assert!((w - 0.25).abs() < 1e-15);
    }

    #[test]
    fn invalid_params() {
        let p = RegistrationParams { kernel_width: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
