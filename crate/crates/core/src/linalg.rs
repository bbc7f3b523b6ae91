//! Sparse matrices in CSR form, constraint-condensing assembly, and a direct
//! sparse LU solve.

use std::sync::Once;

use thiserror::Error;

use crate::fe::ConstraintSet;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("index ({0}, {1}) out of range for a {2} x {3} matrix")]
    IndexOutOfRange(usize, usize, usize, usize),
    #[error("dimension mismatch: matrix is {0} x {1}, vector has length {2}")]
    DimensionMismatch(usize, usize, usize),
    #[error("matrix is singular or structurally deficient")]
    Singular,
    #[error("direct solve exceeded the residual tolerance: {0:.3e}")]
    ResidualTooLarge(f64),
}

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from triplets; duplicates are summed in a fixed
    /// order (stable sort by row, column), which keeps assembly deterministic.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<SparseMatrix, LinalgError> {
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(LinalgError::IndexOutOfRange(r, c, n_rows, n_cols));
            }
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(order.len());
        let mut values: Vec<f64> = Vec::with_capacity(order.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.n_cols {
            return Err(LinalgError::DimensionMismatch(self.n_rows, self.n_cols, x.len()));
        }
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
        Ok(y)
    }

    /// Transposed matrix (used by adjoint checks in tests).
    pub fn transpose(&self) -> SparseMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                trips.push((*c, r, *v));
            }
        }
        SparseMatrix::from_triplets(self.n_cols, self.n_rows, &trips).unwrap()
    }

    /// Largest absolute entry difference against another matrix, treating
    /// missing entries as zero.
    pub fn max_abs_diff(&self, other: &SparseMatrix) -> f64 {
        use std::collections::HashMap;
        let mut map: HashMap<(usize, usize), f64> = HashMap::new();
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                map.insert((r, *c), *v);
            }
        }
        let mut max = 0.0_f64;
        for r in 0..other.n_rows {
            let (cols, vals) = other.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let a = map.remove(&(r, *c)).unwrap_or(0.0);
                max = max.max((a - v).abs());
            }
        }
        for (_, v) in map {
            max = max.max(v.abs());
        }
        max
    }
}

/// How a degree of freedom enters the condensed system.
#[derive(Debug, Clone)]
enum DofState {
    Free,
    /// Pinned to a prescribed value (Dirichlet).
    Pinned(f64),
    /// Hanging: a weighted combination of master dofs.
    Slave(Vec<(usize, f64)>),
}

/// Accumulates cell-local contributions into a constraint-condensed sparse
/// system: slave rows/columns are distributed onto their masters, pinned dofs
/// are eliminated symmetrically with their value moved to the right-hand side.
pub struct SystemBuilder {
    n: usize,
    states: Vec<DofState>,
    triplets: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl SystemBuilder {
    pub fn new(n: usize, constraints: &ConstraintSet, pinned: &[(usize, f64)]) -> SystemBuilder {
        let mut states = vec![DofState::Free; n];
        for (slave, masters) in constraints.iter() {
            states[slave] = DofState::Slave(masters.to_vec());
        }
        for &(dof, value) in pinned {
            states[dof] = DofState::Pinned(value);
        }
        SystemBuilder {
            n,
            states,
            triplets: Vec::new(),
            rhs: vec![0.0; n],
        }
    }

    fn row_targets(&self, dof: usize) -> Vec<(usize, f64)> {
        match &self.states[dof] {
            DofState::Free => vec![(dof, 1.0)],
            DofState::Pinned(_) => vec![],
            DofState::Slave(masters) => masters
                .iter()
                .filter(|&&(m, _)| matches!(self.states[m], DofState::Free))
                .copied()
                .collect(),
        }
    }

    /// Adds one raw matrix entry `(row, col, value)` with full condensation.
    pub fn add_entry(&mut self, row: usize, col: usize, value: f64) {
        if value == 0.0 {
            return;
        }
        let rows = self.row_targets(row);
        if rows.is_empty() {
            return;
        }
        match &self.states[col] {
            DofState::Free => {
                for &(ri, rw) in &rows {
                    self.triplets.push((ri, col, rw * value));
                }
            }
            DofState::Pinned(g) => {
                let g = *g;
                for &(ri, rw) in &rows {
                    self.rhs[ri] -= rw * value * g;
                }
            }
            DofState::Slave(masters) => {
                for &(m, mw) in masters.clone().iter() {
                    match self.states[m] {
                        DofState::Free => {
                            for &(ri, rw) in &rows {
                                self.triplets.push((ri, m, rw * value * mw));
                            }
                        }
                        DofState::Pinned(g) => {
                            for &(ri, rw) in &rows {
                                self.rhs[ri] -= rw * value * mw * g;
                            }
                        }
                        DofState::Slave(_) => unreachable!("constraints are closed"),
                    }
                }
            }
        }
    }

    /// Adds a right-hand side contribution with row condensation.
    pub fn add_rhs(&mut self, row: usize, value: f64) {
        if value == 0.0 {
            return;
        }
        for (ri, rw) in self.row_targets(row) {
            self.rhs[ri] += rw * value;
        }
    }

    /// Adds a dense cell-local block.
    pub fn add_local(&mut self, dofs: &[usize], local: &[f64], local_rhs: Option<&[f64]>) {
        let n = dofs.len();
        debug_assert_eq!(local.len(), n * n);
        for (i, &di) in dofs.iter().enumerate() {
            for (j, &dj) in dofs.iter().enumerate() {
                self.add_entry(di, dj, local[i * n + j]);
            }
            if let Some(rhs) = local_rhs {
                self.add_rhs(di, rhs[i]);
            }
        }
    }

    /// Finalizes the condensed system. Eliminated dofs carry identity rows;
    /// pinned dofs solve to their prescribed values, slaves to zero (their
    /// conforming values are restored by `distribute_solution`).
    pub fn build(mut self) -> Result<(SparseMatrix, Vec<f64>), LinalgError> {
        for dof in 0..self.n {
            match &self.states[dof] {
                DofState::Pinned(g) => {
                    self.triplets.push((dof, dof, 1.0));
                    self.rhs[dof] = *g;
                }
                DofState::Slave(_) => {
                    self.triplets.push((dof, dof, 1.0));
                    self.rhs[dof] = 0.0;
                }
                DofState::Free => {}
            }
        }
        let m = SparseMatrix::from_triplets(self.n, self.n, &self.triplets)?;
        Ok((m, self.rhs))
    }
}

/// Restores conforming values at constrained dofs after a condensed solve.
pub fn distribute_solution(constraints: &ConstraintSet, x: &mut [f64]) {
    constraints.distribute(x);
}

static FAER_SETUP: Once = Once::new();

/// Direct sparse LU solve with partial pivoting. The relative residual is
/// verified to be at most `1e-10`.
pub fn solve_direct(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    FAER_SETUP.call_once(|| {
        // One deterministic accumulation order regardless of host threads.
        faer::set_global_parallelism(faer::Par::Seq);
    });
    if a.n_rows != a.n_cols {
        return Err(LinalgError::DimensionMismatch(a.n_rows, a.n_cols, b.len()));
    }
    if b.len() != a.n_rows {
        return Err(LinalgError::DimensionMismatch(a.n_rows, a.n_cols, b.len()));
    }
    let mut trips = Vec::with_capacity(a.nnz());
    for r in 0..a.n_rows {
        let (cols, vals) = a.row(r);
        for (c, v) in cols.iter().zip(vals) {
            trips.push(faer::sparse::Triplet::new(r, *c, *v));
        }
    }
    let fa = faer::sparse::SparseColMat::try_new_from_triplets(a.n_rows, a.n_cols, &trips)
        .map_err(|_| LinalgError::Singular)?;
    let lu = fa.sp_lu().map_err(|_| LinalgError::Singular)?;
    use faer::linalg::solvers::Solve;
    let rhs = faer::Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = lu.solve(&rhs);
    let x: Vec<f64> = (0..b.len()).map(|i| x[(i, 0)]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::Singular);
    }
    let ax = a.matvec(&x)?;
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let res = ax
        .iter()
        .zip(b)
        .map(|(y, bi)| (y - bi) * (y - bi))
        .sum::<f64>()
        .sqrt();
    if b_norm > 0.0 && res / b_norm > 1e-10 {
        return Err(LinalgError::ResidualTooLarge(res / b_norm));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_from_triplets() {
        let trips: Vec<(usize, usize, f64)> = (0..4).map(|i| (i, i, 1.0)).collect();
        let m = SparseMatrix::from_triplets(4, 4, &trips).unwrap();
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let x = solve_direct(&m, &b).unwrap();
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let trips = vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0), (0, 1, 0.5), (0, 1, -0.5)];
        let m = SparseMatrix::from_triplets(2, 2, &trips).unwrap();
        let y = m.matvec(&[1.0, 1.0]).unwrap();
        assert!((y[0] - 3.0).abs() < 1e-15);
        assert!((y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn poisson_1d_matches_dense_oracle() {
        // 3-point stencil, n = 10, b = 1; dense Gaussian elimination oracle.
        let n = 10;
        let mut trips = Vec::new();
        for i in 0..n {
            trips.push((i, i, 2.0));
            if i > 0 {
                trips.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                trips.push((i, i + 1, -1.0));
            }
        }
        let m = SparseMatrix::from_triplets(n, n, &trips).unwrap();
        let b = vec![1.0; n];
        let x = solve_direct(&m, &b).unwrap();

        // Dense elimination with partial pivoting.
        let mut a = vec![vec![0.0_f64; n + 1]; n];
        for i in 0..n {
            a[i][i] = 2.0;
            if i > 0 {
                a[i][i - 1] = -1.0;
            }
            if i + 1 < n {
                a[i][i + 1] = -1.0;
            }
            a[i][n] = 1.0;
        }
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..=n {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        let mut xd = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = a[i][n];
            for j in i + 1..n {
                s -= a[i][j] * xd[j];
            }
            xd[i] = s / a[i][i];
        }
        for (xi, xo) in x.iter().zip(&xd) {
            assert!((xi - xo).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_saddle_block_requires_pivoting() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let x = solve_direct(&m, &[1.0, 2.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14);
        assert!((x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_fails_explicitly() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(solve_direct(&m, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn random_spd_roundtrip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 60;
        let mut trips = Vec::new();
        for i in 0..n {
            trips.push((i, i, 4.0 + rng.gen_range(0.0..1.0)));
            let j = rng.gen_range(0..n);
            if j != i {
                let v = rng.gen_range(-0.5..0.5);
                trips.push((i, j, v));
                trips.push((j, i, v));
            }
        }
        let m = SparseMatrix::from_triplets(n, n, &trips).unwrap();
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = m.matvec(&x0).unwrap();
        let x = solve_direct(&m, &b).unwrap();
        let err: f64 = x.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-10);
    }

    #[test]
    fn assembly_with_identity_blocks_and_no_constraints() {
        let cs = ConstraintSet::default();
        let mut sb = SystemBuilder::new(3, &cs, &[]);
        for d in 0..3 {
            sb.add_local(&[d], &[1.0], Some(&[d as f64]));
        }
        let (m, rhs) = sb.build().unwrap();
        let x = solve_direct(&m, &rhs).unwrap();
        for d in 0..3 {
            assert!((x[d] - d as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn hanging_constraint_condensation_matches_dense_elimination() {
        // Toy problem: dofs {a=0, b=1, c=2}, constraint c = (a+b)/2, raw
        // local matrix couples all three. Oracle: eliminate by hand with
        // the substitution matrix C, giving C^T A C on the masters.
        let raw = [
            2.0, 0.5, 0.3, //
            0.5, 1.5, 0.2, //
            0.3, 0.2, 1.0,
        ];
        let rhs_raw = [1.0, 2.0, 0.5];
        let mut cs = ConstraintSet::default();
        // Assemble through the builder.
        {
            // Construct the constraint via the public surface of fe: build a
            // set manually through a tiny mesh is overkill; inject directly.
            let masters = vec![(0usize, 0.5), (1usize, 0.5)];
            cs_insert(&mut cs, 2, masters);
        }
        let mut sb = SystemBuilder::new(3, &cs, &[]);
        sb.add_local(&[0, 1, 2], &raw, Some(&rhs_raw));
        let (m, rhs) = sb.build().unwrap();

        // Dense oracle: C is 3x2 with rows [1,0],[0,1],[0.5,0.5].
        let c = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let mut ared = [[0.0; 2]; 2];
        let mut bred = [0.0; 2];
        for i in 0..3 {
            for j in 0..3 {
                for a in 0..2 {
                    for b in 0..2 {
                        ared[a][b] += c[i][a] * raw[i * 3 + j] * c[j][b];
                    }
                }
            }
            for a in 0..2 {
                bred[a] += c[i][a] * rhs_raw[i];
            }
        }
        // The condensed system must contain exactly the reduced operator on
        // the master dofs and an identity row for the slave.
        for a in 0..2 {
            let (cols, vals) = m.row(a);
            for (col, v) in cols.iter().zip(vals) {
                if *col < 2 {
                    assert!((v - ared[a][*col]).abs() < 1e-14);
                }
            }
            assert!((rhs[a] - bred[a]).abs() < 1e-14);
        }
        let (cols, vals) = m.row(2);
        assert_eq!(cols, &[2]);
        assert!((vals[0] - 1.0).abs() < 1e-14);

        // Solving and distributing reproduces the constrained solution.
        let mut x = solve_direct(&m, &rhs).unwrap();
        distribute_solution(&cs, &mut x);
        assert!((x[2] - 0.5 * (x[0] + x[1])).abs() < 1e-14);
    }

    #[test]
    fn dirichlet_pinning_is_exact_and_symmetric() {
        let cs = ConstraintSet::default();
        let mut sb = SystemBuilder::new(2, &cs, &[(1, 2.0)]);
        sb.add_local(&[0, 1], &[2.0, -1.0, -1.0, 2.0], Some(&[0.0, 0.0]));
        let (m, rhs) = sb.build().unwrap();
        // Row 0: the coupling to the pinned dof moved to the rhs.
        assert!((rhs[0] - 2.0).abs() < 1e-14);
        let x = solve_direct(&m, &rhs).unwrap();
        assert!((x[1] - 2.0).abs() < 1e-14);
        assert!((x[0] - 1.0).abs() < 1e-14);
        // Column elimination keeps the matrix symmetric.
        assert!(m.max_abs_diff(&m.transpose()) < 1e-14);
    }

    /// Test helper: inject a raw constraint into a set.
    fn cs_insert(cs: &mut ConstraintSet, slave: usize, masters: Vec<(usize, f64)>) {
        cs.insert_for_tests(slave, masters);
    }
}
