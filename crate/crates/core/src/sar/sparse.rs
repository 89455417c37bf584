//! Minimal CSR storage for the filter's fixed-pattern symmetric operators.

use crate::par::{self, Parallelism};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from triplets; duplicates are summed, columns sorted per row.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    vals.push(v);
                    last = Some(j);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.vals[a..b])
    }

    /// Position of entry (i, j) in the value array, if present.
    pub fn pos(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b].binary_search(&j).ok().map(|off| a + off)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pos(i, j).map_or(0.0, |p| self.vals[p])
    }

    pub fn vals(&self) -> &[f64] {
        &self.vals
    }

    pub fn vals_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.vals.iter_mut() {
            *v *= factor;
        }
    }

    /// Adds `d[i]` to each diagonal entry; the diagonal must already be in
    /// the pattern.
    pub fn add_diagonal(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.n);
        for (i, &v) in d.iter().enumerate() {
            let p = self.pos(i, i).expect("diagonal present in pattern");
            self.vals[p] += v;
        }
    }

    /// Below this row count a matvec is too small for the fork/join
    /// overhead to pay off; it runs sequentially regardless of mode.
    pub const PARALLEL_MATVEC_MIN: usize = 16_384;

    pub fn matvec(&self, x: &[f64], mode: Parallelism) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mode = if self.n < Self::PARALLEL_MATVEC_MIN {
            Parallelism::Sequential
        } else {
            mode
        };
        par::map_indexed(mode, self.n, |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
        })
    }

    /// Sparse product `self * other`, rows accumulated densely.
    pub fn multiply(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        let mut acc = vec![0.0f64; n];
        let mut touched: Vec<usize> = Vec::new();
        for i in 0..n {
            let (cols, vs) = self.row(i);
            for (&k, &aik) in cols.iter().zip(vs) {
                let (bcols, bvals) = other.row(k);
                for (&j, &bkj) in bcols.iter().zip(bvals) {
                    if acc[j] == 0.0 && !touched.contains(&j) {
                        touched.push(j);
                    }
                    acc[j] += aik * bkj;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                col_idx.push(j);
                vals.push(acc[j]);
                acc[j] = 0.0;
            }
            touched.clear();
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Row sums, for null-space checks.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).1.iter().sum::<f64>())
            .collect()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m[(i, j)] = v;
            }
        }
        m
    }
}
