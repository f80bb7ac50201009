//! Compressed sparse row storage and a profile (skyline) LDLᵀ factorization.
//!
//! The factorization performs no pivoting. It is intended for symmetric
//! positive-definite matrices and for symmetric quasi-definite matrices of the
//! form `[A B; Bᵀ -C]` with `A`, `C` positive definite, for which an LDLᵀ
//! factorization exists under any symmetric ordering. Rows are equilibrated by
//! `1/sqrt(|a_ii|)` before factoring so that blocks of very different physical
//! scale (stiffness vs. permittivity) do not destroy accuracy.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Sparse matrix in CSR layout with sorted, duplicate-free column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed in insertion
/// order when converted, so the result is reproducible bit-for-bit.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> CsrMatrix {
        // stable sort keeps the insertion order of duplicates
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut data: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.nrows {
            indptr[i + 1] += indptr[i];
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            data,
        }
    }
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut b = TripletBuilder::new(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    b.push(i, j, m[(i, j)]);
                }
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Iterates `(col, value)` over the stored entries of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[row]..self.indptr[row + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.data[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.indptr[row]..self.indptr[row + 1];
        match self.indices[range.clone()].binary_search(&col) {
            Ok(k) => self.data[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.nrows)
            .map(|r| x[r] * self.row(r).map(|(c, v)| v * y[c]).sum::<f64>())
            .sum()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Extracts the submatrix on the given row and column index lists.
    /// `row_map[old] = Some(new)` selects and renumbers.
    pub fn restrict(&self, row_map: &[Option<usize>], nr: usize, col_map: &[Option<usize>], nc: usize) -> Self {
        let mut b = TripletBuilder::with_capacity(nr, nc, self.nnz());
        for (r, c, v) in self.triplets() {
            if let (Some(rn), Some(cn)) = (row_map[r], col_map[c]) {
                b.push(rn, cn, v);
            }
        }
        b.build()
    }

    pub fn transpose(&self) -> Self {
        let mut b = TripletBuilder::with_capacity(self.ncols, self.nrows, self.nnz());
        for (r, c, v) in self.triplets() {
            b.push(c, r, v);
        }
        b.build()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        self.triplets()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
            / scale
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Profile-stored LDLᵀ factors of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    scale: Vec<f64>,
    first: Vec<usize>,
    offset: Vec<usize>,
    /// row i of L (strictly lower part, columns first[i]..i) at offset[i]..
    lower: Vec<f64>,
    diag: Vec<f64>,
    original: CsrMatrix,
}

impl LdlFactor {
    /// Factors a symmetric matrix given with both triangles stored.
    pub fn new(a: &CsrMatrix, context: &str) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LDLᵀ needs a square matrix");
        let scale: Vec<f64> = a
            .diagonal()
            .iter()
            .map(|&d| if d != 0.0 { 1.0 / d.abs().sqrt() } else { 1.0 })
            .collect();

        let mut first: Vec<usize> = (0..n).collect();
        for (r, c, v) in a.triplets() {
            if c < r && v != 0.0 {
                first[r] = first[r].min(c);
            }
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i]);
        }
        let mut lower = vec![0.0; offset[n]];
        let mut diag = vec![0.0; n];
        for i in 0..n {
            for (c, v) in a.row(i) {
                if v == 0.0 {
                    continue;
                }
                let sv = v * scale[i] * scale[c];
                if c < i {
                    lower[offset[i] + c - first[i]] += sv;
                } else if c == i {
                    diag[i] += sv;
                }
            }
        }

        let max_diag = diag.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(1.0);
        let tiny = 1e-14 * max_diag;
        for i in 0..n {
            let fi = first[i];
            let (head, row_i) = lower.split_at_mut(offset[i]);
            // row_i[j - fi] holds g_ij = l_ij d_j during the sweep
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let row_j = &head[offset[j]..offset[j] + (j - fj)];
                let gi = &row_i[k0 - fi..j - fi];
                let lj = &row_j[k0 - fj..j - fj];
                let dot: f64 = gi.iter().zip(lj).map(|(a, b)| a * b).sum();
                row_i[j - fi] -= dot;
            }
            let mut di = diag[i];
            for j in fi..i {
                let g = row_i[j - fi];
                let l = g / diag[j];
                di -= g * l;
                row_i[j - fi] = l;
            }
            if !(di.abs() > tiny) || !di.is_finite() {
                return Err(Error::Singular {
                    context: context.to_string(),
                    pivot: i,
                    value: di,
                });
            }
            diag[i] = di;
        }

        Ok(Self {
            n,
            scale,
            first,
            offset,
            lower,
            diag,
            original: a.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of negative pivots; equals the number of negative eigenvalues.
    pub fn negative_pivots(&self) -> usize {
        self.diag.iter().filter(|d| **d < 0.0).count()
    }

    fn solve_raw(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = b.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        for i in 0..n {
            let fi = self.first[i];
            let li = &self.lower[self.offset[i]..self.offset[i + 1]];
            let dot: f64 = li.iter().zip(&x[fi..i]).map(|(a, b)| a * b).sum();
            x[i] -= dot;
        }
        for i in 0..n {
            x[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let xi = x[i];
            let li = &self.lower[self.offset[i]..self.offset[i + 1]];
            for (xk, l) in x[fi..i].iter_mut().zip(li) {
                *xk -= l * xi;
            }
        }
        x.iter_mut().zip(&self.scale).for_each(|(v, s)| *v *= s);
        x
    }

    /// Solves `A x = b` with one step of iterative refinement.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = self.solve_raw(b);
        let ax = self.original.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = self.solve_raw(&r);
        x.iter_mut().zip(&dx).for_each(|(x, d)| *x += d);
        x
    }
}
