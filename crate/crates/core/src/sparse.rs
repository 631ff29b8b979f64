//! Symmetric sparse matrices in CSR layout and a cached sparse Cholesky
//! factorization.
//!
//! All operators in this crate are symmetric, so the CSR arrays double as a
//! CSC description of the same matrix. The symbolic factorization depends
//! only on the pattern and is computed once per pattern; numeric
//! refactorizations reuse it.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt, SymbolicLu as FaerSymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{MatMut, Side};

use crate::error::VmptError;

/// Shared sparsity pattern of a square matrix (sorted column indices per row).
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from element connectivity: every pair of indices
    /// within one element is coupled.
    pub fn from_elements<'a, I>(n: usize, elements: I) -> Self
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for el in elements {
            for &a in el {
                for &b in el {
                    rows[a].push(b);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(&r);
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx }
    }

    /// Builds a pattern from explicit `(row, col)` entries plus the diagonal.
    /// The caller supplies both triangles of a symmetric pattern.
    pub fn from_entries<I>(n: usize, entries: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, j) in entries {
            rows[i].push(j);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(&r);
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx }
    }

    /// `(row, col)` of every stored entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |k| (i, self.col_idx[k])))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of entry (i, j) in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn col(&self, k: usize) -> usize {
        self.col_idx[k]
    }
}

/// Square sparse matrix sharing an immutable [`Pattern`].
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let nnz = pattern.nnz();
        Self { pattern, values: vec![0.0; nnz] }
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Adds `v` to entry (i, j). Panics if the entry is outside the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .pattern
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) not in sparsity pattern"));
        self.values[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Scatters a dense element matrix (row-major, `dofs.len()` squared).
    pub fn add_element(&mut self, dofs: &[usize], ke: &[f64]) {
        let m = dofs.len();
        debug_assert_eq!(ke.len(), m * m);
        for (a, &i) in dofs.iter().enumerate() {
            let row = self.pattern.row(i);
            let cols = &self.pattern.col_idx[row.clone()];
            for (b, &j) in dofs.iter().enumerate() {
                let k = row.start + cols.binary_search(&j).expect("element entry outside pattern");
                self.values[k] += ke[a * m + b];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `y = A x`
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for (i, yi) in y.iter_mut().enumerate().take(p.n) {
            let mut acc = 0.0;
            for k in p.row(i) {
                acc += self.values[k] * x[p.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// Bilinear form `yᵀ A x`.
    pub fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = &self.pattern;
        let mut acc = 0.0;
        for (i, &yi) in y.iter().enumerate().take(p.n) {
            if yi == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for k in p.row(i) {
                row += self.values[k] * x[p.col_idx[k]];
            }
            acc += yi * row;
        }
        acc
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    /// Row-sum lumping: a diagonal matrix on the same pattern.
    pub fn lumped(&self) -> Self {
        let mut out = Self::zeros(Arc::clone(&self.pattern));
        for i in 0..self.dim() {
            let s: f64 = self.pattern.row(i).map(|k| self.values[k]).sum();
            out.add(i, i, s);
        }
        out
    }

    /// Largest |A_ij - A_ji| over the pattern.
    pub fn asymmetry(&self) -> f64 {
        let p = &self.pattern;
        let mut worst: f64 = 0.0;
        for i in 0..p.n {
            for k in p.row(i) {
                let j = p.col_idx[k];
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Replaces rows and columns flagged in `pinned` by identity rows while
    /// keeping the pattern (entries become explicit zeros).
    pub fn pin_rows(&mut self, pinned: &[bool]) {
        let p = Arc::clone(&self.pattern);
        for i in 0..p.n {
            for k in p.row(i) {
                let j = p.col_idx[k];
                if pinned[i] || pinned[j] {
                    self.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Dense copy, for small problems and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.pattern.row(i) {
                row[self.pattern.col_idx[k]] = self.values[k];
            }
        }
        d
    }

    fn faer_view(&self) -> SparseColMatRef<'_, usize, f64> {
        let p = &self.pattern;
        let sym = SymbolicSparseColMatRef::new_checked(p.n, p.n, &p.row_ptr, None, &p.col_idx);
        SparseColMatRef::new(sym, &self.values)
    }
}

/// Symbolic Cholesky analysis for one pattern (fill-reducing ordering and
/// elimination tree). Cheap to clone.
#[derive(Clone)]
pub struct SymbolicCholesky {
    pattern: Arc<Pattern>,
    inner: SymbolicLlt<usize>,
}

impl std::fmt::Debug for SymbolicCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymbolicCholesky").field("dim", &self.pattern.n).finish()
    }
}

impl SymbolicCholesky {
    pub fn analyze(pattern: &Arc<Pattern>) -> Result<Self, VmptError> {
        let sym = SymbolicSparseColMatRef::new_checked(
            pattern.n,
            pattern.n,
            &pattern.row_ptr,
            None,
            &pattern.col_idx,
        );
        let inner = SymbolicLlt::try_new(sym, Side::Lower)
            .map_err(|e| VmptError::LinearSolver(format!("symbolic analysis failed: {e:?}")))?;
        Ok(Self { pattern: Arc::clone(pattern), inner })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    /// Numeric factorization of a matrix with this pattern.
    pub fn factorize(&self, a: &CsrMatrix) -> Result<CholeskyFactor, VmptError> {
        assert!(
            Arc::ptr_eq(&self.pattern, &a.pattern) || *self.pattern == *a.pattern,
            "matrix pattern does not match the symbolic analysis"
        );
        let llt = Llt::try_new_with_symbolic(self.inner.clone(), a.faer_view(), Side::Lower)
            .map_err(|_| VmptError::NotPositiveDefinite)?;
        Ok(CholeskyFactor { llt, n: a.dim() })
    }
}

/// Numeric `L Lᵀ` factorization; immutable and shareable read-only.
pub struct CholeskyFactor {
    llt: Llt<usize, f64>,
    n: usize,
}

impl std::fmt::Debug for CholeskyFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CholeskyFactor").field("dim", &self.n).finish()
    }
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.n);
        let mat = MatMut::from_column_major_slice_mut(rhs, self.n, 1);
        self.llt.solve_in_place(mat);
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Symbolic sparse LU analysis for symmetric but indefinite systems.
#[derive(Clone)]
pub struct SymbolicLu {
    pattern: Arc<Pattern>,
    inner: FaerSymbolicLu<usize>,
}

impl std::fmt::Debug for SymbolicLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymbolicLu").field("dim", &self.pattern.n).finish()
    }
}

impl SymbolicLu {
    /// The pattern must be symmetric; its CSR arrays are read as CSC.
    pub fn analyze(pattern: &Arc<Pattern>) -> Result<Self, VmptError> {
        let sym = SymbolicSparseColMatRef::new_checked(
            pattern.n,
            pattern.n,
            &pattern.row_ptr,
            None,
            &pattern.col_idx,
        );
        let inner = FaerSymbolicLu::try_new(sym)
            .map_err(|e| VmptError::LinearSolver(format!("symbolic analysis failed: {e:?}")))?;
        Ok(Self { pattern: Arc::clone(pattern), inner })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    /// Numeric factorization of a symmetric matrix with this pattern.
    pub fn factorize(&self, a: &CsrMatrix) -> Result<LuFactor, VmptError> {
        assert!(
            Arc::ptr_eq(&self.pattern, &a.pattern) || *self.pattern == *a.pattern,
            "matrix pattern does not match the symbolic analysis"
        );
        let lu = Lu::try_new_with_symbolic(self.inner.clone(), a.faer_view())
            .map_err(|e| VmptError::LinearSolver(format!("LU factorization failed: {e:?}")))?;
        Ok(LuFactor { lu, n: a.dim() })
    }
}

/// Numeric sparse LU factorization with partial pivoting.
pub struct LuFactor {
    lu: Lu<usize, f64>,
    n: usize,
}

impl LuFactor {
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.n);
        let mat = MatMut::from_column_major_slice_mut(rhs, self.n, 1);
        self.lu.solve_in_place(mat);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s x`
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += s * xi);
}
