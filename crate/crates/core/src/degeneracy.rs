//! Two-stage degeneracy detection for scan-to-map registration.
//!
//! Stage 1 compares the eigen-structure of the measured registration Hessian
//! with a reference Hessian through the spectrum metric
//!
//! ```text
//! d_e = sum_i (1 / lambda_i) * (1 - |e_i . v_i| / (|e_i| |v_i|))^2
//! ```
//!
//! and drops the map constraint entirely when `d_e` exceeds a threshold.
//! Stage 2 assigns every correspondence to the translation axis its normal is
//! most aligned with and flags the weakest axis when the strongest one has at
//! least `s_thres` times more constraints.
//!
//! The reference Hessian is built from the prior map around the converged
//! pose: every map point with a valid normal inside the scan's footprint,
//! treated as a complete scan registered perfectly at that pose.

use std::collections::BTreeMap;

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{voxel_key, PointCloud, SpatialIndex};
use crate::registration::{AlignResult, Correspondence};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DegeneracyError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// Translation axis in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }
}

/// Set of degenerate translation axes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct AxisMask(u8);

impl AxisMask {
    pub const EMPTY: AxisMask = AxisMask(0);

    pub fn from_axes(axes: &[Axis]) -> Self {
        AxisMask(axes.iter().fold(0, |m, a| m | a.bit()))
    }

    pub fn from_bits(bits: u8) -> Self {
        AxisMask(bits & 0b111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & axis.bit() != 0
    }

    pub fn insert(&mut self, axis: Axis) {
        self.0 |= axis.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn axes(self) -> Vec<Axis> {
        Axis::ALL.into_iter().filter(|a| self.contains(*a)).collect()
    }
}

impl Serialize for AxisMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.axes().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AxisMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(AxisMask::from_axes(&Vec::<Axis>::deserialize(d)?))
    }
}

/// Eigen-decomposition of a 6x6 information matrix.
///
/// Eigenvalues are ascending; each eigenvector is unit length with its
/// largest-magnitude component positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vector6<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Matrix6<f64>,
}

impl Spectrum {
    pub fn reconstruct(&self) -> Matrix6<f64> {
        self.eigenvectors * Matrix6::from_diagonal(&self.eigenvalues) * self.eigenvectors.transpose()
    }
}

/// Symmetric eigen-decomposition with deterministic ordering and signs.
pub fn spectrum(h: &Matrix6<f64>) -> Result<Spectrum, DegeneracyError> {
    if h.iter().any(|x| !x.is_finite()) {
        return Err(DegeneracyError::NonFinite);
    }
    let asym = (h - h.transpose()).amax();
    if asym > 1e-9 * h.amax().max(1.0) {
        return Err(DegeneracyError::NotSymmetric(asym));
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut values = Vector6::zeros();
    let mut vectors = Matrix6::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut v: Vector6<f64> = eig.eigenvectors.column(src).into_owned();
        v /= v.norm();
        let mut lead = 0;
        for k in 1..6 {
            // first index wins among equal magnitudes
            if v[k].abs() > v[lead].abs() + 1e-12 {
                lead = k;
            }
        }
        if v[lead] < 0.0 {
            v = -v;
        }
        vectors.set_column(dst, &v);
    }
    Ok(Spectrum { eigenvalues: values, eigenvectors: vectors })
}

/// Spectrum metric between a measurement and a reference decomposition.
///
/// Eigenvalues and eigenvectors `e_i` come from `measurement`; `v_i` are the
/// index-matched reference eigenvectors. Returns `+inf` if any measurement
/// eigenvalue is not strictly positive.
pub fn spectrum_metric(measurement: &Spectrum, reference: &Spectrum) -> f64 {
    if measurement.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return f64::INFINITY;
    }
    (0..6)
        .map(|i| {
            let e = measurement.eigenvectors.column(i).normalize();
            let v = reference.eigenvectors.column(i).normalize();
            // 1 - |cos| from the chord length, exact for identical directions
            let d = 0.5 * (e - v).norm_squared().min((e + v).norm_squared());
            d * d / measurement.eigenvalues[i]
        })
        .sum()
}

/// Axis a correspondence constrains: the largest-magnitude component of its
/// normal, ties resolved x before y before z.
#[inline]
pub fn dominant_axis(c: &Correspondence) -> Axis {
    let n = c.normal;
    let (ax, ay, az) = (n.x.abs(), n.y.abs(), n.z.abs());
    if ax >= ay && ax >= az {
        Axis::X
    } else if ay >= az {
        Axis::Y
    } else {
        Axis::Z
    }
}

/// Per-axis constraint counts `(N_x, N_y, N_z)`.
pub fn classify_constraints(corrs: &[Correspondence]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for c in corrs {
        counts[dominant_axis(c).index()] += 1;
    }
    counts
}

/// Ratios `s_i = N_i / N_min`. An axis with zero count against a nonzero one
/// has an infinite ratio on the other axes.
pub fn constraint_ratios(counts: [usize; 3]) -> [f64; 3] {
    let min = *counts.iter().min().unwrap_or(&0);
    counts.map(|n| {
        if n == min {
            1.0
        } else if min == 0 {
            f64::INFINITY
        } else {
            n as f64 / min as f64
        }
    })
}

/// Hessian of a set of world points with unit normals, each contributing the
/// point-to-plane row `[p x n; n]` of a perfectly registered scan.
pub fn point_set_hessian<'a>(points: impl IntoIterator<Item = (&'a Vector3<f64>, &'a Vector3<f64>)>) -> Matrix6<f64> {
    let mut h = Matrix6::zeros();
    for (p, n) in points {
        let q = p.cross(n);
        let j = Vector6::new(q.x, q.y, q.z, n.x, n.y, n.z);
        h += j * j.transpose();
    }
    h
}

/// Reference Hessian from the map points with valid normals within `radius`
/// of `center`.
pub fn reference_hessian(map: &PointCloud, index: &SpatialIndex, center: &Vector3<f64>, radius: f64) -> Matrix6<f64> {
    let Some(normals) = map.normals.as_ref() else {
        return Matrix6::zeros();
    };
    let near = index.radius(center, radius);
    point_set_hessian(
        near.iter().map(|nb| (&map.points[nb.index], &normals[nb.index])).filter(|(_, n)| n.norm_squared() > 0.5),
    )
}

/// Map points with valid normals bucketed into cubic cells, each cell
/// carrying the summed Hessian of its points.
///
/// A ball query adds whole cells that lie inside the ball and visits points
/// only in cells cut by its boundary, so it returns the same sum as
/// [`reference_hessian`] up to summation order.
#[derive(Debug, Clone)]
pub struct ReferenceGrid {
    cell: f64,
    centers: Option<SpatialIndex>,
    sums: Vec<Matrix6<f64>>,
    /// `members[c]` is a range into `points`.
    members: Vec<std::ops::Range<usize>>,
    points: Vec<(Vector3<f64>, Vector3<f64>)>,
}

impl ReferenceGrid {
    pub fn build(map: &PointCloud, cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let mut cells: BTreeMap<(i64, i64, i64), Vec<(Vector3<f64>, Vector3<f64>)>> = BTreeMap::new();
        if let Some(normals) = map.normals.as_ref() {
            for (p, n) in map.points.iter().zip(normals) {
                if n.norm_squared() > 0.5 {
                    cells.entry(voxel_key(p, cell)).or_default().push((*p, *n));
                }
            }
        }
        let mut centers = Vec::with_capacity(cells.len());
        let mut sums = Vec::with_capacity(cells.len());
        let mut members = Vec::with_capacity(cells.len());
        let mut points = Vec::new();
        for ((i, j, k), pts) in cells {
            centers.push(Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * cell);
            sums.push(point_set_hessian(pts.iter().map(|(p, n)| (p, n))));
            members.push(points.len()..points.len() + pts.len());
            points.extend(pts);
        }
        let centers = SpatialIndex::from_points(&centers).ok();
        Self { cell, centers, sums, members, points }
    }

    /// Summed Hessian of the points within `radius` of `center`.
    pub fn hessian(&self, center: &Vector3<f64>, radius: f64) -> Matrix6<f64> {
        let Some(centers) = &self.centers else {
            return Matrix6::zeros();
        };
        let half_diagonal = 0.5 * self.cell * 3f64.sqrt();
        let r2 = radius * radius;
        let mut h = Matrix6::zeros();
        for nb in centers.radius(center, radius + half_diagonal) {
            if nb.dist_sq.sqrt() + half_diagonal <= radius {
                h += self.sums[nb.index];
            } else {
                let inside = self.points[self.members[nb.index].clone()]
                    .iter()
                    .filter(|(p, _)| (p - center).norm_squared() <= r2);
                h += point_set_hessian(inside.map(|(p, n)| (p, n)));
            }
        }
        h
    }
}

/// Reference spectrum for an alignment: the footprint is the farthest matched
/// scan point's range from the sensor.
pub fn reference_spectrum(align: &AlignResult, grid: &ReferenceGrid) -> Result<Spectrum, DegeneracyError> {
    let radius = align.correspondences.iter().map(|c| c.source.norm()).fold(0.0, f64::max);
    spectrum(&grid.hessian(&align.pose.translation, radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegeneracyParams {
    /// Stage-1 rejection threshold on `d_e`; `None` means calibrate per map.
    pub d_e_threshold: Option<f64>,
    /// Calibrated threshold = this factor times the first accepted frame's `d_e`.
    pub calibration_factor: f64,
    /// Axis ratio at which the weakest axis is flagged (> 1).
    pub s_thres: f64,
    /// Fewer correspondences than this reject the frame in stage 1.
    pub min_correspondences: usize,
}

impl Default for DegeneracyParams {
    fn default() -> Self {
        Self { d_e_threshold: None, calibration_factor: 10.0, s_thres: 3.0, min_correspondences: 100 }
    }
}

/// Why a frame's map constraint was dropped in stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewCorrespondences,
    SpectrumMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    /// Spectrum metric; `None` when undefined (non-positive eigenvalue).
    #[serde(with = "finite_or_null")]
    pub d_e: f64,
    pub axis_counts: [usize; 3],
    #[serde(with = "finite_or_null_array")]
    pub ratios: [f64; 3],
    pub degenerate_axes: AxisMask,
    pub stage1_reject: bool,
    pub reject_reason: Option<RejectReason>,
}

impl DegeneracyReport {
    /// Mask to apply to the map factor; meaningless when stage 1 rejected.
    pub fn mask(&self) -> AxisMask {
        self.degenerate_axes
    }
}

/// Stage 2: flags the minimum-count axis (and any axis tied with it) when the
/// strongest axis reaches `s_thres` times its count.
pub fn degenerate_axes(counts: [usize; 3], s_thres: f64) -> AxisMask {
    let ratios = constraint_ratios(counts);
    let max_ratio = ratios.iter().cloned().fold(1.0, f64::max);
    let mut mask = AxisMask::EMPTY;
    if max_ratio >= s_thres {
        let min = *counts.iter().min().unwrap_or(&0);
        for axis in Axis::ALL {
            if counts[axis.index()] == min {
                mask.insert(axis);
            }
        }
    }
    mask
}

/// Runs both stages with an explicit stage-1 threshold.
pub fn detect_with_threshold(
    align: &AlignResult,
    reference: &Spectrum,
    s_thres: f64,
    min_correspondences: usize,
    d_e_threshold: f64,
) -> Result<DegeneracyReport, DegeneracyError> {
    let measurement = spectrum(&align.hessian)?;
    let d_e = spectrum_metric(&measurement, reference);
    let counts = classify_constraints(&align.correspondences);
    let ratios = constraint_ratios(counts);
    let degenerate_axes = degenerate_axes(counts, s_thres);
    let reject_reason = if align.correspondences.len() < min_correspondences {
        Some(RejectReason::TooFewCorrespondences)
    } else if !(d_e <= d_e_threshold) {
        Some(RejectReason::SpectrumMetric)
    } else {
        None
    };
    Ok(DegeneracyReport {
        d_e,
        axis_counts: counts,
        ratios,
        degenerate_axes,
        stage1_reject: reject_reason.is_some(),
        reject_reason,
    })
}

/// Runs both stages. Without a configured threshold only the sentinel
/// (`d_e = inf`) and the correspondence-count gate reject.
pub fn detect(
    align: &AlignResult,
    reference: &Spectrum,
    params: &DegeneracyParams,
) -> Result<DegeneracyReport, DegeneracyError> {
    detect_with_threshold(
        align,
        reference,
        params.s_thres,
        params.min_correspondences,
        params.d_e_threshold.unwrap_or(f64::MAX),
    )
}

/// Tracks the per-map stage-1 threshold when none is configured.
#[derive(Debug, Clone)]
pub struct ThresholdCalibrator {
    params: DegeneracyParams,
    calibrated: Option<f64>,
}

impl ThresholdCalibrator {
    pub fn new(params: DegeneracyParams) -> Self {
        Self { calibrated: params.d_e_threshold, params }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.calibrated
    }

    /// Detects degeneracy, fixing the threshold from the first frame that
    /// passes the count and finiteness gates.
    pub fn detect(&mut self, align: &AlignResult, reference: &Spectrum) -> Result<DegeneracyReport, DegeneracyError> {
        let p = &self.params;
        let threshold = self.calibrated.unwrap_or(f64::MAX);
        let report = detect_with_threshold(align, reference, p.s_thres, p.min_correspondences, threshold)?;
        if self.calibrated.is_none() && !report.stage1_reject && report.d_e.is_finite() {
            self.calibrated = Some(p.calibration_factor * report.d_e.max(f64::MIN_POSITIVE));
        }
        Ok(report)
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod finite_or_null_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        v.map(|x| if x.is_finite() { Some(x) } else { None }).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        Ok(<[Option<f64>; 3]>::deserialize(d)?.map(|x| x.unwrap_or(f64::INFINITY)))
    }
}
