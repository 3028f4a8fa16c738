use nalgebra::Vector3;
use std::collections::BTreeMap;

use super::se3::Pose;

/// A set of 3-D points with optional per-point normals and timestamps.
///
/// A normal equal to the zero vector marks a point whose neighborhood did not
/// yield a usable plane; such points are skipped by point-to-plane matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub timestamps: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, normals: None, timestamps: None }
    }

    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Self {
        assert_eq!(points.len(), normals.len(), "normals must match points");
        Self { points, normals: Some(normals), timestamps: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// The normal of point `i`, or `None` if absent or flagged invalid.
    #[inline]
    pub fn normal(&self, i: usize) -> Option<Vector3<f64>> {
        let n = self.normals.as_ref()?[i];
        if n == Vector3::zeros() {
            None
        } else {
            Some(n)
        }
    }

    /// Number of points carrying a usable normal.
    pub fn valid_normal_count(&self) -> usize {
        self.normals.as_ref().map(|ns| ns.iter().filter(|n| **n != Vector3::zeros()).count()).unwrap_or(0)
    }

    /// Applies `pose` to every point (and rotates normals).
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| pose.transform_vector(n)).collect()),
            timestamps: self.timestamps.clone(),
        }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        match (&mut self.normals, &other.normals) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            _ => self.normals = None,
        }
        self.timestamps = None;
    }

    /// Checks the structural invariants (length agreement, unit normals).
    pub fn validate(&self) -> bool {
        if let Some(ns) = &self.normals {
            if ns.len() != self.points.len() {
                return false;
            }
            if !ns.iter().all(|n| *n == Vector3::zeros() || (n.norm() - 1.0).abs() <= 1e-6) {
                return false;
            }
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.points.len() {
                return false;
            }
        }
        self.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// Integer voxel coordinate of `p` for cell size `voxel`.
#[inline]
pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> (i64, i64, i64) {
    ((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64)
}

/// Replaces the points of each occupied voxel by their centroid.
///
/// Output order is the lexicographic order of voxel keys, so the result only
/// depends on the multiset of input points per voxel and their order within
/// it. Normals and timestamps are dropped.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in &cloud.points {
        let e = cells.entry(voxel_key(p, voxel)).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    PointCloud::new(cells.into_values().map(|(s, n)| s / n as f64).collect())
}
