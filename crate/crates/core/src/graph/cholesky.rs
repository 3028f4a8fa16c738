//! Block-sparse symmetric system with a minimum-degree ordering and a
//! right-looking block Cholesky factorization.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

/// Symmetric block system `H x = rhs`; only the lower triangle is stored.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    sizes: Vec<usize>,
    diag: Vec<DMatrix<f64>>,
    /// `lower[j][i]` holds block `(i, j)` for `i > j`.
    lower: Vec<BTreeMap<usize, DMatrix<f64>>>,
    rhs: Vec<DVector<f64>>,
}

impl BlockSystem {
    pub fn new(sizes: Vec<usize>) -> Self {
        let diag = sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        let rhs = sizes.iter().map(|&s| DVector::zeros(s)).collect();
        let lower = vec![BTreeMap::new(); sizes.len()];
        Self { sizes, diag, lower, rhs }
    }

    pub fn num_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn block_size(&self, b: usize) -> usize {
        self.sizes[b]
    }

    /// Adds `m` to block `(row, col)` (and implicitly its transpose).
    pub fn add_block(&mut self, row: usize, col: usize, m: &DMatrix<f64>) {
        use std::cmp::Ordering::*;
        match row.cmp(&col) {
            Equal => self.diag[row] += m,
            Greater => {
                let e = self.lower[col].entry(row).or_insert_with(|| DMatrix::zeros(m.nrows(), m.ncols()));
                *e += m;
            }
            Less => {
                let e = self.lower[row].entry(col).or_insert_with(|| DMatrix::zeros(m.ncols(), m.nrows()));
                *e += m.transpose();
            }
        }
    }

    pub fn add_rhs(&mut self, b: usize, v: &DVector<f64>) {
        self.rhs[b] += v;
    }

    pub fn rhs(&self) -> &[DVector<f64>] {
        &self.rhs
    }

    pub fn diagonal(&self, b: usize) -> &DMatrix<f64> {
        &self.diag[b]
    }

    /// Block adjacency (sorted neighbor sets).
    pub fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.sizes.len()];
        for (j, col) in self.lower.iter().enumerate() {
            for &i in col.keys() {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
        adj
    }

    /// Dense copy, for testing and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let offs = self.offsets();
        let n = offs.last().copied().unwrap_or(0) + self.sizes.last().copied().unwrap_or(0);
        let mut h = DMatrix::zeros(n, n);
        for (b, d) in self.diag.iter().enumerate() {
            h.view_mut((offs[b], offs[b]), (self.sizes[b], self.sizes[b])).copy_from(d);
        }
        for (j, col) in self.lower.iter().enumerate() {
            for (&i, m) in col {
                h.view_mut((offs[i], offs[j]), (self.sizes[i], self.sizes[j])).copy_from(m);
                h.view_mut((offs[j], offs[i]), (self.sizes[j], self.sizes[i])).copy_from(&m.transpose());
            }
        }
        h
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.sizes.len());
        let mut acc = 0;
        for &s in &self.sizes {
            offs.push(acc);
            acc += s;
        }
        offs
    }
}

/// Minimum-degree elimination order over the block graph. Ties go to the
/// lowest block index, so the order is deterministic.
pub fn minimum_degree_order(adjacency: &[BTreeSet<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = usize::MAX;
        for v in 0..n {
            if !eliminated[v] && adj[v].len() < best_deg {
                best = v;
                best_deg = adj[v].len();
            }
        }
        eliminated[best] = true;
        order.push(best);
        let nbrs: Vec<usize> = adj[best].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&best);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[best].clear();
    }
    order
}

/// Dense Cholesky of a small block with a relative pivot test. Returns the
/// lower factor, or the failing scalar column.
/// `scale` holds the original (pre-elimination) diagonal.
fn dense_cholesky(a: &DMatrix<f64>, pivot_rel_tol: f64, scale: &[f64]) -> Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d <= 0.0 || d <= pivot_rel_tol * scale[j].abs() {
            return Err(j);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L X = B` in place for lower-triangular `L` (forward substitution).
fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

fn solve_upper_t_in_place(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Block factorization `P H P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    /// Elimination position -> original block.
    order: Vec<usize>,
    diag: Vec<DMatrix<f64>>,
    /// `lower[k]` maps position `i > k` to `L_ik`.
    lower: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

impl BlockCholesky {
    /// Factors `H + damping * I`.
    ///
    /// On failure returns the original index of the block whose pivot
    /// failed. `pivot_rel_tol` flags pivots that are tiny relative to the
    /// matrix diagonal (numerical rank deficiency).
    pub fn factor(system: &BlockSystem, order: &[usize], damping: f64, pivot_rel_tol: f64) -> Result<Self, usize> {
        let n = system.num_blocks();
        let mut pos = vec![0usize; n];
        for (p, &b) in order.iter().enumerate() {
            pos[b] = p;
        }
        let mut diag: Vec<DMatrix<f64>> = order
            .iter()
            .map(|&b| {
                let mut d = system.diag[b].clone();
                if damping > 0.0 {
                    for i in 0..d.nrows() {
                        d[(i, i)] += damping;
                    }
                }
                d
            })
            .collect();
        let scales: Vec<Vec<f64>> = diag.iter().map(|d| d.diagonal().iter().copied().collect()).collect();
        let mut lower: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); n];
        for (j, col) in system.lower.iter().enumerate() {
            for (&i, m) in col {
                let (pi, pj) = (pos[i], pos[j]);
                if pi > pj {
                    lower[pj].insert(pi, m.clone());
                } else {
                    lower[pi].insert(pj, m.transpose());
                }
            }
        }

        for k in 0..n {
            let lkk = dense_cholesky(&diag[k], pivot_rel_tol, &scales[k]).map_err(|_| order[k])?;
            let col = std::mem::take(&mut lower[k]);
            // L_ik = A_ik L_kk^-T  <=>  L_kk L_ik^T = A_ik^T
            let mut lcol: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(col.len());
            for (i, a_ik) in col {
                let mut t = a_ik.transpose();
                solve_lower_in_place(&lkk, &mut t);
                lcol.push((i, t.transpose()));
            }
            for (x, (i, l_ik)) in lcol.iter().enumerate() {
                diag[*i] -= l_ik * l_ik.transpose();
                for (j, l_jk) in &lcol[..x] {
                    // i > j since positions are sorted ascending
                    let upd = l_ik * l_jk.transpose();
                    match lower[*j].get_mut(i) {
                        Some(e) => *e -= upd,
                        None => {
                            lower[*j].insert(*i, -upd);
                        }
                    }
                }
            }
            diag[k] = lkk;
            lower[k] = lcol.into_iter().collect();
        }
        Ok(Self { order: order.to_vec(), diag, lower })
    }

    /// Solves `(H + damping I) x = rhs`; input and output in original block
    /// indexing.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.order.len();
        let mut y: Vec<DVector<f64>> = self.order.iter().map(|&b| rhs[b].clone()).collect();
        // forward: L y = b
        for k in 0..n {
            let mut m = DMatrix::from_column_slice(y[k].len(), 1, y[k].as_slice());
            solve_lower_in_place(&self.diag[k], &mut m);
            y[k] = m.column(0).into_owned();
            for (&i, l_ik) in &self.lower[k] {
                let upd = l_ik * &y[k];
                y[i] -= upd;
            }
        }
        // backward: L^T x = y
        for k in (0..n).rev() {
            let mut v = y[k].clone();
            for (&i, l_ik) in &self.lower[k] {
                v -= l_ik.transpose() * &y[i];
            }
            solve_upper_t_in_place(&self.diag[k], &mut v);
            y[k] = v;
        }
        let mut out = vec![DVector::zeros(0); n];
        for (p, &b) in self.order.iter().enumerate() {
            out[b] = std::mem::replace(&mut y[p], DVector::zeros(0));
        }
        out
    }

    /// Number of stored off-diagonal blocks in the factor (fill measure).
    pub fn factor_blocks(&self) -> usize {
        self.lower.iter().map(|c| c.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(seed: u64) -> BlockSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = vec![6, 3, 6, 6, 3, 6, 3];
        let mut sys = BlockSystem::new(sizes.clone());
        // chain plus a hub on the last block
        let mut pairs: Vec<(usize, usize)> = (0..sizes.len() - 1).map(|i| (i, i + 1)).collect();
        pairs.extend((0..sizes.len() - 1).map(|i| (i, sizes.len() - 1)));
        for (a, b) in pairs {
            let m = sizes[a] + sizes[b];
            let j = DMatrix::from_fn(m + 2, m, |_, _| rng.random_range(-1.0..1.0));
            let h = j.transpose() * &j;
            sys.add_block(a, a, &h.view((0, 0), (sizes[a], sizes[a])).into_owned());
            sys.add_block(b, b, &h.view((sizes[a], sizes[a]), (sizes[b], sizes[b])).into_owned());
            sys.add_block(b, a, &h.view((sizes[a], 0), (sizes[b], sizes[a])).into_owned());
        }
        for (b, &s) in sizes.iter().enumerate() {
            sys.add_rhs(b, &DVector::from_fn(s, |_, _| rng.random_range(-1.0..1.0)));
        }
        sys
    }

    #[test]
    fn solve_matches_dense() {
        for seed in 0..5 {
            let sys = random_system(seed);
            let order = minimum_degree_order(&sys.adjacency());
            let chol = BlockCholesky::factor(&sys, &order, 0.0, 0.0).unwrap();
            let x = chol.solve(sys.rhs());
            let h = sys.to_dense();
            let rhs: Vec<f64> = sys.rhs().iter().flat_map(|v| v.iter().copied()).collect();
            let xd = h.clone().cholesky().unwrap().solve(&DVector::from_vec(rhs));
            let xs: Vec<f64> = x.iter().flat_map(|v| v.iter().copied()).collect();
            let err = (DVector::from_vec(xs) - xd).amax();
            assert!(err < 1e-9, "seed {seed}: {err}");
        }
    }

    #[test]
    fn any_order_gives_same_solution() {
        let sys = random_system(11);
        let a = BlockCholesky::factor(&sys, &[0, 1, 2, 3, 4, 5, 6], 0.0, 0.0).unwrap().solve(sys.rhs());
        let b = BlockCholesky::factor(&sys, &[6, 5, 4, 3, 2, 1, 0], 0.0, 0.0).unwrap().solve(sys.rhs());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).amax() < 1e-9);
        }
    }

    #[test]
    fn minimum_degree_keeps_hub_last() {
        let sys = random_system(3);
        let order = minimum_degree_order(&sys.adjacency());
        assert_eq!(*order.last().unwrap(), 6);
        assert_eq!(order[0], 0);
    }

    #[test]
    fn chain_has_no_fill() {
        let mut sys = BlockSystem::new(vec![2; 50]);
        for i in 0..50 {
            sys.add_block(i, i, &(DMatrix::identity(2, 2) * 4.0));
            if i > 0 {
                sys.add_block(i, i - 1, &(DMatrix::identity(2, 2) * -1.0));
            }
        }
        let order = minimum_degree_order(&sys.adjacency());
        let chol = BlockCholesky::factor(&sys, &order, 0.0, 0.0).unwrap();
        assert_eq!(chol.factor_blocks(), 49);
    }

    #[test]
    fn singular_block_reported() {
        let mut sys = BlockSystem::new(vec![3, 3]);
        sys.add_block(0, 0, &DMatrix::identity(3, 3));
        let err = BlockCholesky::factor(&sys, &[0, 1], 0.0, 1e-14).unwrap_err();
        assert_eq!(err, 1);
        // damping with a floor regularizes the empty block
        assert!(BlockCholesky::factor(&sys, &[0, 1], 1e-3, 0.0).is_ok());
    }
}
