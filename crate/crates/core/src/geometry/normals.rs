use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::kdtree::SpatialIndex;
use super::GeometryError;

/// Default neighborhood size for normal estimation.
pub const DEFAULT_NORMAL_NEIGHBORS: usize = 10;
/// Neighborhoods with `lambda_min / lambda_mid` at or above this are not planar.
pub const FLATNESS_GATE: f64 = 0.1;

/// Outcome of normal estimation for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalQuality {
    Valid,
    /// Neighborhood is too thick to define a plane.
    NotPlanar,
    /// Neighbors are collinear or coincident (two near-zero eigenvalues).
    DegenerateNeighborhood,
}

/// Ascending eigenvalues and matching unit eigenvectors of a symmetric 3x3 matrix.
pub fn sorted_eigen3(m: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (vals, vecs)
}

/// Flips `n` so its largest-magnitude component is positive.
pub fn canonical_sign(n: Vector3<f64>) -> Vector3<f64> {
    let mut lead = 0;
    for a in 1..3 {
        if n[a].abs() > n[lead].abs() {
            lead = a;
        }
    }
    if n[lead] < 0.0 {
        -n
    } else {
        n
    }
}

/// Plane normal of a neighborhood, or the reason there is none.
pub fn neighborhood_normal(points: &[Vector3<f64>]) -> Result<Vector3<f64>, NormalQuality> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    let (vals, vecs) = sorted_eigen3(&cov);
    let scale = vals[2].max(0.0);
    if scale <= 0.0 || vals[1] <= 1e-12 * scale {
        return Err(NormalQuality::DegenerateNeighborhood);
    }
    if vals[0].max(0.0) / vals[1] >= FLATNESS_GATE {
        return Err(NormalQuality::NotPlanar);
    }
    Ok(canonical_sign(vecs[0].normalize()))
}

/// Estimates a normal for every point from its `k` nearest neighbors (the
/// point itself included).
///
/// Points whose neighborhood fails the planarity checks get a zero normal and
/// the corresponding [`NormalQuality`] flag.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<(PointCloud, Vec<NormalQuality>), GeometryError> {
    let index = SpatialIndex::build(cloud)?;
    estimate_normals_with_index(cloud, &index, k)
}

pub fn estimate_normals_with_index(
    cloud: &PointCloud,
    index: &SpatialIndex,
    k: usize,
) -> Result<(PointCloud, Vec<NormalQuality>), GeometryError> {
    if k < 3 {
        return Err(GeometryError::TooFewNeighbors { k });
    }
    if cloud.len() < k {
        return Err(GeometryError::NotEnoughPoints { have: cloud.len(), need: k });
    }
    let results: Vec<(Vector3<f64>, NormalQuality)> = cloud
        .points
        .par_iter()
        .map(|p| {
            let nbrs: Vec<Vector3<f64>> = index.knn(p, k).iter().map(|n| cloud.points[n.index]).collect();
            match neighborhood_normal(&nbrs) {
                Ok(n) => (n, NormalQuality::Valid),
                Err(q) => (Vector3::zeros(), q),
            }
        })
        .collect();
    let (normals, flags): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok((out, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_z0_gives_up_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<_> =
            (0..500).map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0)).collect();
        let (c, flags) = estimate_normals(&PointCloud::new(pts), DEFAULT_NORMAL_NEIGHBORS).unwrap();
        for (i, f) in flags.iter().enumerate() {
            assert_eq!(*f, NormalQuality::Valid);
            let n = c.normal(i).unwrap();
            assert!((n - Vector3::z()).norm() < 1e-6, "{n}");
        }
    }

    #[test]
    fn plane_x5_gives_x_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> =
            (0..300).map(|_| Vector3::new(5.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let (c, _) = estimate_normals(&PointCloud::new(pts), 10).unwrap();
        for i in 0..c.len() {
            assert!((c.normal(i).unwrap() - Vector3::x()).norm() < 1e-6);
        }
    }

    #[test]
    fn tilted_plane_normal_is_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = Vector3::new(0.3, -0.5, 0.8).normalize();
        let u = normal.cross(&Vector3::x()).normalize();
        let v = normal.cross(&u);
        let pts: Vec<_> = (0..400)
            .map(|_| u * rng.random_range(-2.0..2.0) + v * rng.random_range(-2.0..2.0) + normal * 1.5)
            .collect();
        let (c, _) = estimate_normals(&PointCloud::new(pts), 10).unwrap();
        for i in 0..c.len() {
            let angle = c.normal(i).unwrap().dot(&normal).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-6);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 0.0), Vector3::new(2.0, 2.0, 0.0)];
        let (c, flags) = estimate_normals(&PointCloud::new(pts), 3).unwrap();
        assert!(flags.iter().all(|f| *f == NormalQuality::DegenerateNeighborhood));
        assert_eq!(c.valid_normal_count(), 0);
    }

    #[test]
    fn thick_blob_is_not_planar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..50)
            .map(|_| {
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            })
            .collect();
        let (_, flags) = estimate_normals(&PointCloud::new(pts), 10).unwrap();
        assert!(flags.iter().filter(|f| **f == NormalQuality::NotPlanar).count() > 25);
    }

    #[test]
    fn argument_checks() {
        let c = PointCloud::new(vec![Vector3::zeros(); 5]);
        assert!(matches!(estimate_normals(&c, 2), Err(GeometryError::TooFewNeighbors { .. })));
        assert!(matches!(estimate_normals(&c, 6), Err(GeometryError::NotEnoughPoints { .. })));
        assert!(matches!(estimate_normals(&PointCloud::default(), 3), Err(GeometryError::EmptyCloud)));
    }

    #[test]
    fn sign_convention() {
        assert_eq!(canonical_sign(Vector3::new(0.1, -0.9, 0.2)), Vector3::new(-0.1, 0.9, -0.2));
        assert_eq!(canonical_sign(Vector3::new(0.0, 0.0, -1.0)), Vector3::z());
    }
}
