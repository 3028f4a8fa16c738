//! Trajectory (ATE, RPE) and map (accuracy, completeness) metrics.
//!
//! All distances are reported in centimeters; completeness in percent.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{log_map, orthonormalize_rotation, Pose, SpatialIndex};

/// Map-metric inlier threshold (m).
pub const DEFAULT_MAP_THRESHOLD: f64 = 0.20;
/// Timestamp association tolerance (s).
pub const DEFAULT_MAX_DT: f64 = 0.01;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no timestamp pairs within tolerance")]
    NoMatches,
    #[error("need at least {need} associated pairs, have {have}")]
    TooFewPairs { have: usize, need: usize },
    #[error("positions are collinear or coincident; rigid alignment is undefined")]
    DegenerateGeometry,
    #[error("no estimated point lies within the threshold of the reference map")]
    NoInliers,
    #[error("trajectory timestamps must be strictly increasing (entry {index})")]
    NonMonotonic { index: usize },
    #[error("trajectory pose {index} is not a valid rigid transform")]
    InvalidPose { index: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("threshold must be positive and finite")]
    InvalidThreshold,
}

/// Timestamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(EvalError::NonMonotonic { index: i + 1 });
            }
        }
        if let Some(index) = entries.iter().position(|(_, p)| !p.is_valid(1e-6)) {
            return Err(EvalError::InvalidPose { index });
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> + '_ {
        self.entries.iter().map(|(_, p)| p)
    }

    /// Applies `q * pose` to every entry.
    pub fn transformed(&self, q: &Pose) -> Self {
        Self { entries: self.entries.iter().map(|(t, p)| (*t, q.compose(p))).collect() }
    }

    /// Index of the entry nearest to `t` within `max_dt` (lowest index on ties).
    pub fn nearest(&self, t: f64, max_dt: f64) -> Option<usize> {
        let k = self.entries.partition_point(|(s, _)| *s < t);
        let mut best: Option<(f64, usize)> = None;
        for i in [k.wrapping_sub(1), k] {
            if let Some((s, _)) = self.entries.get(i) {
                let d = (s - t).abs();
                if d <= max_dt && best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                    best = Some((d, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

/// Greedy nearest-timestamp association in `est` time order. Each reference
/// entry is used at most once. Returns `(est index, ref index)` pairs.
pub fn associate(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let refs = reference.entries();
    for (i, (t, _)) in est.entries().iter().enumerate() {
        let lo = refs.partition_point(|(s, _)| *s < t - max_dt);
        let mut best: Option<(f64, usize)> = None;
        for (j, (s, _)) in refs.iter().enumerate().skip(lo) {
            if *s > t + max_dt {
                break;
            }
            let d = (s - t).abs();
            if !used[j] && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoMatches);
    }
    Ok(pairs)
}

/// Rigid transform `q` minimizing `sum |q * est_i - ref_i|^2` (no scale).
pub fn align_se3(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Pose, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs { have: pairs.len(), need: 3 });
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let mu_r = pairs.iter().map(|(_, r)| r).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (e, r) in pairs {
        let de = e - mu_e;
        cov += (r - mu_r) * de.transpose();
        scatter += de * de.transpose();
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(EvalError::DegenerateGeometry);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = orthonormalize_rotation(&(u * d * v_t));
    Ok(Pose::new(rot, mu_r - rot * mu_e))
}

/// ATE result: RMSE in cm plus the alignment applied to the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse_cm: f64,
    pub pairs: usize,
    pub alignment: Pose,
}

pub fn ate(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<AteResult, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    let pts: Vec<(Vector3<f64>, Vector3<f64>)> =
        pairs.iter().map(|&(i, j)| (est.entries[i].1.translation, reference.entries[j].1.translation)).collect();
    let q = align_se3(&pts)?;
    let sum: f64 = pts.iter().map(|(e, r)| (q.transform_point(e) - r).norm_squared()).sum();
    Ok(AteResult { rmse_cm: 100.0 * (sum / pts.len() as f64).sqrt(), pairs: pts.len(), alignment: q })
}

fn relative_error(est_a: &Pose, est_b: &Pose, ref_a: &Pose, ref_b: &Pose) -> f64 {
    let rel_est = est_a.between(est_b);
    let rel_ref = ref_a.between(ref_b);
    log_map(&rel_ref.between(&rel_est)).translation.norm()
}

/// RPE over every window of `delta` associated frames, in cm.
pub fn rpe(est: &Trajectory, reference: &Trajectory, max_dt: f64, delta: usize) -> Result<f64, EvalError> {
    let delta = delta.max(1);
    let pairs = associate(est, reference, max_dt)?;
    if pairs.len() < delta + 1 {
        return Err(EvalError::TooFewPairs { have: pairs.len(), need: delta + 1 });
    }
    let errs: Vec<f64> = (0..pairs.len() - delta)
        .map(|k| {
            let (ia, ja) = pairs[k];
            let (ib, jb) = pairs[k + delta];
            relative_error(&est.entries[ia].1, &est.entries[ib].1, &reference.entries[ja].1, &reference.entries[jb].1)
        })
        .collect();
    Ok(100.0 * (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt())
}

/// RPE over segments of at least `distance` meters of reference travel, in
/// cm. Each segment ends at the first associated frame reaching the
/// distance; no interpolation.
pub fn rpe_per_distance(
    est: &Trajectory,
    reference: &Trajectory,
    max_dt: f64,
    distance: f64,
) -> Result<f64, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    let mut travelled = vec![0.0; pairs.len()];
    for k in 1..pairs.len() {
        let a = reference.entries[pairs[k - 1].1].1.translation;
        let b = reference.entries[pairs[k].1].1.translation;
        travelled[k] = travelled[k - 1] + (b - a).norm();
    }
    let mut errs = Vec::new();
    for k in 0..pairs.len() {
        let target = travelled[k] + distance;
        let end = travelled[k..].partition_point(|&d| d < target) + k;
        if end >= pairs.len() {
            break;
        }
        let (ia, ja) = pairs[k];
        let (ib, jb) = pairs[end];
        errs.push(relative_error(
            &est.entries[ia].1,
            &est.entries[ib].1,
            &reference.entries[ja].1,
            &reference.entries[jb].1,
        ));
    }
    if errs.is_empty() {
        return Err(EvalError::TooFewPairs { have: pairs.len(), need: 2 });
    }
    Ok(100.0 * (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt())
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold)
    }
}

/// Mean distance (cm) from estimated points to their nearest reference point,
/// over estimated points within `threshold` meters.
pub fn map_accuracy(est: &[Vector3<f64>], gt_index: &SpatialIndex, threshold: f64) -> Result<f64, EvalError> {
    check_threshold(threshold)?;
    if est.is_empty() || gt_index.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let dists: Vec<f64> = est.par_iter().map(|p| gt_index.nearest(p).dist_sq.sqrt()).collect();
    let inliers: Vec<f64> = dists.into_iter().filter(|&d| d <= threshold).collect();
    if inliers.is_empty() {
        return Err(EvalError::NoInliers);
    }
    Ok(100.0 * inliers.iter().sum::<f64>() / inliers.len() as f64)
}

/// Percentage of reference points whose nearest estimated point lies within
/// `threshold` meters.
pub fn map_completeness(
    est_index: Option<&SpatialIndex>,
    gt: &[Vector3<f64>],
    threshold: f64,
) -> Result<f64, EvalError> {
    check_threshold(threshold)?;
    if gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let Some(index) = est_index.filter(|i| !i.is_empty()) else {
        return Ok(0.0);
    };
    let hits: Vec<bool> = gt.par_iter().map(|p| index.nearest(p).dist_sq.sqrt() <= threshold).collect();
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / gt.len() as f64)
}

/// Benchmark metrics for one sequence. Map metrics are absent when no
/// reference map was provided or no estimated point was an inlier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_rmse_cm: f64,
    pub rpe_rmse_cm: f64,
    pub rpe_delta: usize,
    pub rpe_per_distance_cm: Option<f64>,
    pub rpe_distance_m: f64,
    pub map_acc_cm: Option<f64>,
    pub map_com_percent: Option<f64>,
    pub map_threshold_m: f64,
    pub matched_pairs: usize,
    /// Alignment applied to the estimate: `[tx, ty, tz, qx, qy, qz, qw]`.
    pub alignment: [f64; 7],
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "ate_rmse_cm,rpe_rmse_cm,rpe_delta,rpe_per_distance_cm,rpe_distance_m,map_acc_cm,map_com_percent,map_threshold_m,matched_pairs";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{},{},{:.3},{},{},{:.3},{}",
            self.ate_rmse_cm,
            self.rpe_rmse_cm,
            self.rpe_delta,
            opt(self.rpe_per_distance_cm),
            self.rpe_distance_m,
            opt(self.map_acc_cm),
            opt(self.map_com_percent),
            self.map_threshold_m,
            self.matched_pairs
        )
    }
}

pub fn pose_to_array(p: &Pose) -> [f64; 7] {
    let q = p.quaternion();
    [p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]]
}

/// Inverse of [`pose_to_array`]; `None` for non-finite values or a zero
/// quaternion. The quaternion need not be normalized.
pub fn pose_from_array(a: &[f64; 7]) -> Option<Pose> {
    let qn = (a[3] * a[3] + a[4] * a[4] + a[5] * a[5] + a[6] * a[6]).sqrt();
    if !a.iter().all(|v| v.is_finite()) || !(qn > 1e-9) {
        return None;
    }
    Some(Pose::from_quaternion(Vector3::new(a[0], a[1], a[2]), a[3], a[4], a[5], a[6]))
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub max_dt: f64,
    pub rpe_delta: usize,
    pub rpe_distance: f64,
    pub map_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { max_dt: DEFAULT_MAX_DT, rpe_delta: 1, rpe_distance: 1.0, map_threshold: DEFAULT_MAP_THRESHOLD }
    }
}

/// Computes every metric available from the inputs.
pub fn evaluate(
    est: &Trajectory,
    reference: &Trajectory,
    maps: Option<(&[Vector3<f64>], &[Vector3<f64>])>,
    params: &EvalParams,
) -> Result<MetricsReport, EvalError> {
    let a = ate(est, reference, params.max_dt)?;
    let r = rpe(est, reference, params.max_dt, params.rpe_delta)?;
    let rd = rpe_per_distance(est, reference, params.max_dt, params.rpe_distance).ok();
    let (acc, com) = match maps {
        Some((est_map, gt_map)) if !est_map.is_empty() && !gt_map.is_empty() => {
            let gt_index = SpatialIndex::from_points(gt_map).map_err(|_| EvalError::EmptyCloud)?;
            let est_index = SpatialIndex::from_points(est_map).map_err(|_| EvalError::EmptyCloud)?;
            let acc = match map_accuracy(est_map, &gt_index, params.map_threshold) {
                Ok(v) => Some(v),
                Err(EvalError::NoInliers) => None,
                Err(e) => return Err(e),
            };
            (acc, Some(map_completeness(Some(&est_index), gt_map, params.map_threshold)?))
        }
        _ => (None, None),
    };
    Ok(MetricsReport {
        ate_rmse_cm: a.rmse_cm,
        rpe_rmse_cm: r,
        rpe_delta: params.rpe_delta.max(1),
        rpe_per_distance_cm: rd,
        rpe_distance_m: params.rpe_distance,
        map_acc_cm: acc,
        map_com_percent: com,
        map_threshold_m: params.map_threshold,
        matched_pairs: a.pairs,
        alignment: pose_to_array(&a.alignment),
    })
}
