//! Deterministic sparse/dense linear algebra: CSR storage, products, SPD
//! solves and weighted norms.
//!
//! Determinism contract: `spmv` accumulates each row left to right in storage
//! order, global reductions over element-indexed data use [`pairwise_sum`],
//! and conjugate-gradient inner products fold left to right. Repeated runs on
//! the same platform therefore produce bit-identical results.

use thiserror::Error;

/// Largest system the dense Cholesky path accepts.
pub const DENSE_SOLVE_LIMIT: usize = 2000;

/// Relative asymmetry tolerated by the SPD solvers.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("CG did not converge in {max_iter} iterations (relative residual {residual:.3e})")]
    NonConvergence { max_iter: usize, residual: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("direct solver limited to n <= {limit}, got n = {n}")]
    TooLargeForDirect { n: usize, limit: usize },
}

/// Compressed sparse row matrix in canonical form: within each row the column
/// indices are strictly increasing and duplicate-free, and every stored value
/// is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a canonical CSR matrix from (row, col, value) triplets.
    /// Duplicate entries are accumulated in triplet order before
    /// canonicalization, so assembly stays deterministic.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, LinalgError> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(LinalgError::DimensionMismatch(format!(
                    "triplet ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !v.is_finite() {
                return Err(LinalgError::NonFinite(format!("triplet value at ({r}, {c})")));
            }
            per_row[r].push((c, v));
        }
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in &mut per_row {
            // stable sort keeps duplicate accumulation in insertion order
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut acc = row[i].1;
                let mut j = i + 1;
                while j < row.len() && row[j].0 == c {
                    acc += row[j].1;
                    j += 1;
                }
                col_indices.push(c);
                values.push(acc);
                i = j;
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self { n_rows, n_cols, row_offsets, col_indices, values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Diagonal matrix from the given entries.
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut triplets = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(LinalgError::DimensionMismatch("ragged dense input".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n_rows, n_cols, &triplets)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for i in 0..self.n_rows {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                out[i][self.col_indices[k]] = self.values[k];
            }
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        span.map(move |k| (self.col_indices[k], self.values[k]))
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_rows.min(self.n_cols)];
        for i in 0..d.len() {
            for (c, v) in self.row(i) {
                if c == i {
                    d[i] = v;
                }
            }
        }
        d
    }

    /// y = A x with per-row left-to-right accumulation.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.n_cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "spmv: matrix is {}x{}, vector has length {}",
                self.n_rows,
                self.n_cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.n_rows];
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            y[i] = acc;
        }
        Ok(y)
    }

    /// Canonical-form transpose.
    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols];
        for &c in &self.col_indices {
            counts[c] += 1;
        }
        let mut row_offsets = vec![0usize; self.n_cols + 1];
        for i in 0..self.n_cols {
            row_offsets[i + 1] = row_offsets[i] + counts[i];
        }
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = row_offsets.clone();
        for i in 0..self.n_rows {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let c = self.col_indices[k];
                let pos = next[c];
                col_indices[pos] = i;
                values[pos] = self.values[k];
                next[c] += 1;
            }
        }
        // scanning rows in order makes each transposed row already sorted
        CsrMatrix { n_rows: self.n_cols, n_cols: self.n_rows, row_offsets, col_indices, values }
    }

    /// C = A B, canonical output, deterministic accumulation order.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<CsrMatrix, LinalgError> {
        if self.n_cols != other.n_rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut scratch = vec![0.0; other.n_cols];
        let mut seen = vec![false; other.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for i in 0..self.n_rows {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let a = self.values[k];
                let r = self.col_indices[k];
                for kk in other.row_offsets[r]..other.row_offsets[r + 1] {
                    let c = other.col_indices[kk];
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    scratch[c] += a * other.values[kk];
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                col_indices.push(c);
                values.push(scratch[c]);
                scratch[c] = 0.0;
                seen[c] = false;
            }
            touched.clear();
            row_offsets.push(col_indices.len());
        }
        Ok(CsrMatrix { n_rows: self.n_rows, n_cols: other.n_cols, row_offsets, col_indices, values })
    }

    /// A + c * B over matching sparsity unions.
    pub fn add_scaled(&self, other: &CsrMatrix, c: f64) -> Result<CsrMatrix, LinalgError> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(LinalgError::DimensionMismatch("add_scaled shape mismatch".into()));
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                triplets.push((i, j, v));
            }
            for (j, v) in other.row(i) {
                triplets.push((i, j, c * v));
            }
        }
        CsrMatrix::from_triplets(self.n_rows, self.n_cols, &triplets)
    }

    /// Largest absolute asymmetry relative to the largest absolute entry.
    pub fn relative_asymmetry(&self) -> f64 {
        if self.n_rows != self.n_cols {
            return f64::INFINITY;
        }
        let t = self.transpose();
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..self.n_rows {
            let mut a = self.row(i).peekable();
            let mut b = t.row(i).peekable();
            loop {
                match (a.peek().copied(), b.peek().copied()) {
                    (None, None) => break,
                    (Some((ca, va)), Some((cb, _))) if ca < cb => {
                        worst = worst.max(va.abs());
                        a.next();
                    }
                    (Some((ca, _)), Some((cb, vb))) if cb < ca => {
                        worst = worst.max(vb.abs());
                        b.next();
                    }
                    (Some((_, va)), Some((_, vb))) => {
                        worst = worst.max((va - vb).abs());
                        a.next();
                        b.next();
                    }
                    (Some((_, va)), None) => {
                        worst = worst.max(va.abs());
                        a.next();
                    }
                    (None, Some((_, vb))) => {
                        worst = worst.max(vb.abs());
                        b.next();
                    }
                }
            }
        }
        worst / scale
    }
}

/// How [`solve_spd`] realizes the solve.
#[derive(Debug, Clone)]
pub enum SolveMethod {
    /// Dense Cholesky; exact up to roundoff, limited to `n <= DENSE_SOLVE_LIMIT`.
    Direct,
    /// Jacobi-preconditioned conjugate gradient.
    Cg { tol: f64, max_iter: usize },
}

impl SolveMethod {
    pub fn cg(tol: f64, max_iter: usize) -> Self {
        SolveMethod::Cg { tol, max_iter }
    }
}

/// Dense Cholesky factor (lower triangular, row major).
pub struct DenseCholesky {
    n: usize,
    l: Vec<f64>,
}

impl DenseCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinalgError> {
        let n = a.n_rows();
        if n != a.n_cols() {
            return Err(LinalgError::DimensionMismatch("Cholesky of non-square matrix".into()));
        }
        if n > DENSE_SOLVE_LIMIT {
            return Err(LinalgError::TooLargeForDirect { n, limit: DENSE_SOLVE_LIMIT });
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[i * n + j] = v;
                }
            }
        }
        for j in 0..n {
            let mut d = l[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotSpd(format!("nonpositive pivot {d:.3e} at column {j}")));
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in j + 1..n {
                let mut s = l[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / dj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch("Cholesky solve rhs length".into()));
        }
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[i * n + k] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        Ok(x)
    }
}

/// Left-to-right inner product (fixed order, reproducible).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

/// Euclidean norm via [`dot`].
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned CG for SPD systems. Deterministic: fixed iteration
/// order, left-to-right inner products.
pub fn cg_jacobi(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, LinalgError> {
    let n = a.n_rows();
    let diag = a.diag();
    for (i, &d) in diag.iter().enumerate() {
        if d <= 0.0 {
            return Err(LinalgError::NotSpd(format!("nonpositive diagonal {d:.3e} at row {i}")));
        }
    }
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm2(&r) / b_norm;
    for _ in 0..max_iter {
        if res <= tol {
            return Ok(x);
        }
        let q = a.spmv(&p)?;
        let pq = dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            return Err(LinalgError::NotSpd(format!("negative curvature {pq:.3e} in CG")));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = norm2(&r) / b_norm;
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= tol {
        Ok(x)
    } else {
        Err(LinalgError::NonConvergence { max_iter, residual: res })
    }
}

/// Unpreconditioned CG that stops at the given relative residual and never
/// reports failure; deliberately crude iterates are the caller's point.
pub fn cg_plain_capped(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let n = a.n_rows();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return vec![0.0; n];
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() / b_norm <= tol {
            break;
        }
        let q = a.spmv(&p).expect("dimension checked by caller");
        let pq = dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            break;
        }
        let alpha = rr / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

fn check_spd_matrix(a: &CsrMatrix) -> Result<(), LinalgError> {
    if a.n_rows() != a.n_cols() {
        return Err(LinalgError::DimensionMismatch("solve_spd: non-square matrix".into()));
    }
    let asym = a.relative_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NotSpd(format!("relative asymmetry {asym:.3e} > {SYMMETRY_TOL:.0e}")));
    }
    Ok(())
}

fn check_spd_input(a: &CsrMatrix, b: &[f64]) -> Result<(), LinalgError> {
    check_spd_matrix(a)?;
    if b.len() != a.n_rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve_spd: matrix is {}x{}, rhs has length {}",
            a.n_rows(),
            a.n_cols(),
            b.len()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite("solve_spd rhs".into()));
    }
    Ok(())
}

/// Solves A x = b for symmetric positive definite A.
pub fn solve_spd(a: &CsrMatrix, b: &[f64], method: &SolveMethod) -> Result<Vec<f64>, LinalgError> {
    check_spd_input(a, b)?;
    match method {
        SolveMethod::Direct => DenseCholesky::factor(a)?.solve(b),
        SolveMethod::Cg { tol, max_iter } => cg_jacobi(a, b, *tol, *max_iter),
    }
}

/// Reusable SPD solver: factors once for the direct path.
pub enum SpdSolver<'a> {
    Direct(DenseCholesky),
    Cg { a: &'a CsrMatrix, tol: f64, max_iter: usize },
}

impl<'a> SpdSolver<'a> {
    pub fn new(a: &'a CsrMatrix, method: &SolveMethod) -> Result<Self, LinalgError> {
        check_spd_matrix(a)?;
        match method {
            SolveMethod::Direct => Ok(SpdSolver::Direct(DenseCholesky::factor(a)?)),
            SolveMethod::Cg { tol, max_iter } => {
                Ok(SpdSolver::Cg { a, tol: *tol, max_iter: *max_iter })
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        match self {
            SpdSolver::Direct(f) => f.solve(b),
            SpdSolver::Cg { a, tol, max_iter } => cg_jacobi(a, b, *tol, *max_iter),
        }
    }
}

/// v' W v for SPD W.
pub fn weighted_norm_sq(w: &CsrMatrix, v: &[f64]) -> Result<f64, LinalgError> {
    let wv = w.spmv(v)?;
    Ok(dot(v, &wv))
}

/// v' W^{-1} v for SPD W, via a solve; clamped at zero against roundoff.
pub fn weighted_inv_norm_sq(
    w: &CsrMatrix,
    v: &[f64],
    method: &SolveMethod,
) -> Result<f64, LinalgError> {
    let winv_v = solve_spd(w, v, method)?;
    Ok(dot(v, &winv_v).max(0.0))
}

/// Deterministic pairwise reduction.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, rng: &mut StdRng) -> CsrMatrix {
        // B'B + n I with dense random B
        let b: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for (k, bk) in b.iter().enumerate() {
                    s += bk[i] * bk[j];
                    let _ = k;
                }
                *v = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        CsrMatrix::from_dense(&rows).unwrap()
    }

    #[test]
    fn spmv_identity() {
        let a = CsrMatrix::identity(3);
        assert_eq!(a.spmv(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn spmv_small_dense_oracle() {
        let a = CsrMatrix::from_dense(&[vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(a.spmv(&[1.0, 1.0]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn spmv_dimension_mismatch_rejected() {
        let a = CsrMatrix::identity(3);
        assert!(matches!(a.spmv(&[1.0, 2.0]), Err(LinalgError::DimensionMismatch(_))));
    }

    #[test]
    fn adjointness_against_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                (0..7)
                    .map(|_| if rng.gen_bool(0.4) { rng.gen_range(-1.0..1.0) } else { 0.0 })
                    .collect()
            })
            .collect();
        let a = CsrMatrix::from_dense(&rows).unwrap();
        let at = a.transpose();
        let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs = dot(&a.spmv(&x).unwrap(), &y);
        let rhs = dot(&x, &at.spmv(&y).unwrap());
        assert!((lhs - rhs).abs() <= 1e-13 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn from_triplets_accumulates_duplicates() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0)]).unwrap();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.to_dense()[0][0], 3.0);
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let a = CsrMatrix::identity(4);
        let b = vec![4.0, -1.0, 0.5, 2.0];
        let x = solve_spd(&a, &b, &SolveMethod::Direct).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_2x2_hand_elimination_oracle() {
        let a = CsrMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = solve_spd(&a, &[1.0, 2.0], &SolveMethod::Direct).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn cg_residual_on_random_spd() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_spd(50, &mut rng);
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_spd(&a, &b, &SolveMethod::cg(1e-14, 10_000)).unwrap();
        let r: Vec<f64> =
            a.spmv(&x).unwrap().iter().zip(&b).map(|(ax, bi)| ax - bi).collect();
        assert!(norm2(&r) <= 1e-13 * norm2(&b));
    }

    #[test]
    fn direct_and_cg_agree() {
        let mut rng = StdRng::seed_from_u64(5);
        for n in [20, 80, 200] {
            let a = random_spd(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xd = solve_spd(&a, &b, &SolveMethod::Direct).unwrap();
            let xc = solve_spd(&a, &b, &SolveMethod::cg(1e-14, 100_000)).unwrap();
            let diff: Vec<f64> = xd.iter().zip(&xc).map(|(a, b)| a - b).collect();
            assert!(norm2(&diff) <= 1e-10 * norm2(&xd).max(1.0));
        }
    }

    #[test]
    fn non_spd_detected() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_spd(&a, &[1.0, 1.0], &SolveMethod::Direct),
            Err(LinalgError::NotSpd(_))
        ));
        let asym = CsrMatrix::from_dense(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_spd(&asym, &[1.0, 1.0], &SolveMethod::Direct),
            Err(LinalgError::NotSpd(_))
        ));
    }

    #[test]
    fn cg_nonconvergence_carries_residual() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = random_spd(40, &mut rng);
        let b: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match solve_spd(&a, &b, &SolveMethod::cg(1e-14, 2)) {
            Err(LinalgError::NonConvergence { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn weighted_norms_diagonal_oracle() {
        let w = CsrMatrix::identity(2);
        assert_eq!(weighted_norm_sq(&w, &[3.0, 4.0]).unwrap(), 25.0);
        let w = CsrMatrix::diagonal(&[2.0, 8.0]);
        assert_eq!(weighted_norm_sq(&w, &[1.0, 1.0]).unwrap(), 10.0);
        let inv = weighted_inv_norm_sq(&w, &[1.0, 1.0], &SolveMethod::Direct).unwrap();
        assert!((inv - 0.625).abs() < 1e-15);
    }

    #[test]
    fn cauchy_schwarz_between_weighted_norms() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..20 {
            let w = random_spd(12, &mut rng);
            let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = weighted_norm_sq(&w, &v).unwrap();
            let b = weighted_inv_norm_sq(&w, &v, &SolveMethod::Direct).unwrap();
            let vv = dot(&v, &v);
            assert!(a * b >= vv * vv * (1.0 - 1e-12));
        }
    }

    #[test]
    fn inv_norm_of_wv_equals_norm_of_v() {
        let mut rng = StdRng::seed_from_u64(23);
        let w = random_spd(30, &mut rng);
        let v: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = w.spmv(&v).unwrap();
        let a = weighted_inv_norm_sq(&w, &wv, &SolveMethod::Direct).unwrap();
        let b = weighted_norm_sq(&w, &v).unwrap();
        assert!((a - b).abs() <= 1e-10 * b.abs());
    }

    #[test]
    fn transpose_round_trip_canonical() {
        let a = CsrMatrix::from_triplets(3, 4, &[(0, 2, 1.0), (0, 1, 2.0), (2, 0, 3.0)]).unwrap();
        let att = a.transpose().transpose();
        assert_eq!(a, att);
    }

    #[test]
    fn matmul_matches_dense() {
        let mut rng = StdRng::seed_from_u64(31);
        let a_rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect())
            .collect();
        let b_rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect())
            .collect();
        let a = CsrMatrix::from_dense(&a_rows).unwrap();
        let b = CsrMatrix::from_dense(&b_rows).unwrap();
        let c = a.matmul(&b).unwrap().to_dense();
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..6 {
                    s += a_rows[i][k] * b_rows[k][j];
                }
                assert!((c[i][j] - s).abs() < 1e-14);
            }
        }
    }
}
