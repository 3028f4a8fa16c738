//! Exact k-d tree over a point cloud.
//!
//! Results are identical to an exhaustive scan: candidates are ranked by
//! `(squared distance, original index)` so ties resolve to the lowest index.

use nalgebra::Vector3;

use super::cloud::PointCloud;
use super::GeometryError;

const LEAF_SIZE: usize = 10;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

/// Balanced space-partitioning tree answering k-NN and radius queries.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    /// Points in tree order.
    points: Vec<[f64; 3]>,
    /// Original index of each tree-ordered point.
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

/// A query hit: original point index and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    #[inline]
    fn key(&self) -> (f64, usize) {
        (self.dist_sq, self.index)
    }

    #[inline]
    fn less(&self, other: &Neighbor) -> bool {
        let (a, b) = (self.key(), other.key());
        a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
    }
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self, GeometryError> {
        Self::from_points(&cloud.points)
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if points.len() > u32::MAX as usize {
            return Err(GeometryError::TooManyPoints(points.len()));
        }
        let mut items: Vec<([f64; 3], u32)> =
            points.iter().enumerate().map(|(i, p)| ([p.x, p.y, p.z], i as u32)).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(&mut items, 0, &mut nodes);
        let (pts, ids) = items.into_iter().unzip();
        Ok(Self { points: pts, ids, nodes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Single nearest neighbor.
    pub fn nearest(&self, query: &Vector3<f64>) -> Neighbor {
        let q = [query.x, query.y, query.z];
        let mut best = Neighbor { index: usize::MAX, dist_sq: f64::INFINITY };
        self.nearest_rec(0, &q, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let cand = Neighbor { index: self.ids[i] as usize, dist_sq: dist_sq(&self.points[i], q) };
                    if cand.less(best) {
                        *best = cand;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near as usize, q, best);
                if diff * diff <= best.dist_sq {
                    self.nearest_rec(far as usize, q, best);
                }
            }
        }
    }

    /// The `k` nearest neighbors sorted by `(distance, index)`.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap: Vec<Neighbor> = Vec::with_capacity(k + 1);
        self.knn_rec(0, &q, k, &mut heap);
        heap
    }

    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let cand = Neighbor { index: self.ids[i] as usize, dist_sq: dist_sq(&self.points[i], q) };
                    if out.len() == k {
                        if !cand.less(&out[k - 1]) {
                            continue;
                        }
                        out.pop();
                    }
                    let pos = out.partition_point(|n| n.less(&cand));
                    out.insert(pos, cand);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near as usize, q, k, out);
                let worst = if out.len() == k { out[k - 1].dist_sq } else { f64::INFINITY };
                if diff * diff <= worst {
                    self.knn_rec(far as usize, q, k, out);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), sorted by `(distance, index)`.
    pub fn radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<Neighbor> {
        let q = [query.x, query.y, query.z];
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.radius_rec(0, &q, r2, &mut out);
        out.sort_by(|a, b| a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index)));
        out
    }

    fn radius_rec(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let d = dist_sq(&self.points[i], q);
                    if d <= r2 {
                        out.push(Neighbor { index: self.ids[i] as usize, dist_sq: d });
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_rec(near as usize, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_rec(far as usize, q, r2, out);
                }
            }
        }
    }
}

#[inline]
fn dist_sq(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn build_node(items: &mut [([f64; 3], u32)], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if items.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf { start: offset as u32, end: (offset + items.len()) as u32 });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a))).unwrap_or(0);
    if hi[axis] - lo[axis] <= 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { start: offset as u32, end: (offset + items.len()) as u32 });
        return id;
    }
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1)));
    let value = items[mid].0[axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = items.split_at_mut(mid);
    let left = build_node(l, offset, nodes);
    let right = build_node(r, offset + mid, nodes);
    nodes[id as usize] = Node::Split { axis: axis as u8, value, left, right };
    id
}
