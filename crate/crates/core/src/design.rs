//! Design matrices for the reward head: dense rows (embeddings, attribute
//! features) or CSR rows (TF-IDF).

use ndarray::{Array2, ArrayView1, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(n_cols: usize, indptr: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(indices.len(), values.len());
        assert_eq!(*indptr.last().unwrap_or(&0), indices.len());
        debug_assert!(indices.iter().all(|&i| i < n_cols));
        CsrMatrix {
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    Dense(Array2<f64>),
    Sparse(CsrMatrix),
}

impl Design {
    pub fn from_rows(rows: &[Vec<f64>]) -> Design {
        let n_cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Design::Dense(Array2::from_shape_vec((rows.len(), n_cols), data).expect("ragged rows"))
    }

    pub fn n_rows(&self) -> usize {
        match self {
            Design::Dense(x) => x.nrows(),
            Design::Sparse(x) => x.n_rows(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            Design::Dense(x) => x.ncols(),
            Design::Sparse(x) => x.n_cols,
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Design::Dense(x) => x.iter().all(|v| v.is_finite()),
            Design::Sparse(x) => x.values.iter().all(|v| v.is_finite()),
        }
    }

    pub fn row_dot(&self, i: usize, w: &[f64]) -> f64 {
        match self {
            Design::Dense(x) => x.row(i).dot(&ArrayView1::from(w)),
            Design::Sparse(x) => x.row(i).map(|(j, v)| v * w[j]).sum(),
        }
    }

    /// `out = X w`
    pub fn matvec(&self, w: &[f64], out: &mut [f64]) {
        match self {
            Design::Dense(x) => {
                let r = x.dot(&ArrayView1::from(w));
                out.copy_from_slice(r.as_slice().expect("contiguous"));
            }
            Design::Sparse(x) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = x.row(i).map(|(j, v)| v * w[j]).sum();
                }
            }
        }
    }

    /// `out = Xᵀ r`
    pub fn t_matvec(&self, r: &[f64], out: &mut [f64]) {
        match self {
            Design::Dense(x) => {
                let g = x.t().dot(&ArrayView1::from(r));
                out.copy_from_slice(g.as_slice().expect("contiguous"));
            }
            Design::Sparse(x) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (i, &ri) in r.iter().enumerate() {
                    if ri != 0.0 {
                        for (j, v) in x.row(i) {
                            out[j] += v * ri;
                        }
                    }
                }
            }
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Design {
        match self {
            Design::Dense(x) => Design::Dense(x.select(Axis(0), rows)),
            Design::Sparse(x) => {
                let mut indptr = vec![0];
                let mut indices = Vec::new();
                let mut values = Vec::new();
                for &i in rows {
                    for (j, v) in x.row(i) {
                        indices.push(j);
                        values.push(v);
                    }
                    indptr.push(indices.len());
                }
                Design::Sparse(CsrMatrix::new(x.n_cols, indptr, indices, values))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_sparse_agree() {
        let rows = vec![vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 0.0], vec![4.0, 0.0, 0.0]];
        let dense = Design::from_rows(&rows);
        let sparse = Design::Sparse(CsrMatrix::new(
            3,
            vec![0, 2, 3, 4],
            vec![0, 2, 1, 0],
            vec![1.0, 2.0, 3.0, 4.0],
        ));
        let w = [0.5, -1.0, 2.0];
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        dense.matvec(&w, &mut a);
        sparse.matvec(&w, &mut b);
        assert_eq!(a, b);
        let r = [1.0, 2.0, -1.0];
        dense.t_matvec(&r, &mut a);
        sparse.t_matvec(&r, &mut b);
        assert_eq!(a, b);
        assert_eq!(dense.select_rows(&[2, 0]).row_dot(0, &w), 2.0);
        assert_eq!(sparse.select_rows(&[2, 0]).row_dot(1, &w), 4.5);
    }
}
