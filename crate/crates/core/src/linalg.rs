//! Small dense 2x2 algebra, compensated summation and sparse helpers.

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 { xx: 1.0, xy: 0.0, yy: 1.0 };

    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Sym2 { xx, xy, yy }
    }
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }
    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }
    pub fn inverse(&self) -> Sym2 {
        let d = self.det();
        Sym2::new(self.yy / d, -self.xy / d, self.xx / d)
    }
    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let m = 0.5 * self.trace();
        let r = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        [m - r, m + r]
    }
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }
    pub fn to_mat(&self) -> Mat2 {
        Mat2([[self.xx, self.xy], [self.xy, self.yy]])
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 0) => self.xx,
            (1, 1) => self.yy,
            _ => self.xy,
        }
    }
}

/// General 2x2 matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Mat2 = Mat2([[0.0, 0.0], [0.0, 0.0]]);

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2([[a, 0.0], [0.0, b]])
    }
    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }
    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }
    pub fn transpose(&self) -> Mat2 {
        Mat2([[self.0[0][0], self.0[1][0]], [self.0[0][1], self.0[1][1]]])
    }
    pub fn inverse(&self) -> Mat2 {
        let d = self.det();
        Mat2([
            [self.0[1][1] / d, -self.0[0][1] / d],
            [-self.0[1][0] / d, self.0[0][0] / d],
        ])
    }
    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &o.0;
        Mat2([
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ])
    }
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1],
            self.0[1][0] * v[0] + self.0[1][1] * v[1],
        ]
    }
    pub fn add(&self, o: &Mat2) -> Mat2 {
        let mut r = *self;
        for i in 0..2 {
            for j in 0..2 {
                r.0[i][j] += o.0[i][j];
            }
        }
        r
    }
    pub fn sub_scalar(&self, z: f64) -> Mat2 {
        Mat2([[self.0[0][0] - z, self.0[0][1]], [self.0[1][0], self.0[1][1] - z]])
    }
    /// Symmetric part.
    pub fn sym(&self) -> Sym2 {
        Sym2::new(self.0[0][0], 0.5 * (self.0[0][1] + self.0[1][0]), self.0[1][1])
    }
    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Neumaier-compensated sum in fixed iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for v in it {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) type Sparse = CsMat<f64>;

/// `diag(d) * a` for a CSR matrix.
pub(crate) fn row_scale(d: &[f64], a: &Sparse) -> Sparse {
    let mut out = a.to_csr();
    for (r, mut row) in out.outer_iterator_mut().enumerate() {
        for (_, v) in row.iter_mut() {
            *v *= d[r];
        }
    }
    out
}

/// `sum_k diag(d_k) * a_k`.
pub(crate) fn weighted_sum(terms: &[(&[f64], &Sparse)]) -> Sparse {
    let mut acc: Option<Sparse> = None;
    for (d, a) in terms {
        let t = row_scale(d, a);
        acc = Some(match acc {
            None => t,
            Some(prev) => &prev + &t,
        });
    }
    acc.expect("weighted_sum needs at least one term")
}

pub(crate) fn matvec(a: &Sparse, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.rows()];
    for (r, row) in a.outer_iterator().enumerate() {
        let mut s = 0.0;
        for (c, v) in row.iter() {
            s += v * x[c];
        }
        y[r] = s;
    }
    y
}

/// `a^T x`.
pub(crate) fn matvec_t(a: &Sparse, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.cols()];
    for (r, row) in a.outer_iterator().enumerate() {
        for (c, v) in row.iter() {
            y[c] += v * x[r];
        }
    }
    y
}

pub(crate) fn from_triplets(rows: usize, cols: usize, t: &[(usize, usize, f64)]) -> Sparse {
    let mut tri = TriMat::new((rows, cols));
    for &(r, c, v) in t {
        tri.add_triplet(r, c, v);
    }
    tri.to_csr()
}

/// Solve `a x = b` for several right-hand sides with a sparse LU.
pub(crate) struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn new(a: &Sparse) -> Result<Self, String> {
        use faer::sparse::{SparseColMat, Triplet};
        let n = a.rows();
        let mut t = Vec::with_capacity(a.nnz());
        for (r, row) in a.outer_iterator().enumerate() {
            for (c, &v) in row.iter() {
                if v != 0.0 {
                    t.push(Triplet::new(r, c, v));
                }
            }
        }
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, a.cols(), &t)
            .map_err(|e| format!("{e:?}"))?;
        let lu = m.sp_lu().map_err(|e| format!("{e:?}"))?;
        Ok(SparseLu { lu, n })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        use faer::prelude::*;
        let x = self.lu.solve(&self.column(b));
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Solve `a^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        use faer::prelude::*;
        let x = self.lu.solve_transpose(&self.column(b));
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    fn column(&self, b: &[f64]) -> faer::Mat<f64> {
        faer::Mat::<f64>::from_fn(self.n, 1, |i, _| b[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_inverse_roundtrip() {
        let a = Sym2::new(2.0, 0.3, 1.5);
        let b = a.inverse();
        let p = a.to_mat().mul(&b.to_mat());
        assert!((p.0[0][0] - 1.0).abs() < 1e-14 && p.0[0][1].abs() < 1e-14);
        let e = a.eigenvalues();
        assert!((e[0] * e[1] - a.det()).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn sparse_lu_solves_small_system() {
        let a = from_triplets(3, 3, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0), (2, 2, 2.0), (2, 0, 1.0)]);
        let lu = SparseLu::new(&a).unwrap();
        let x = lu.solve(&[1.0, 2.0, 3.0]);
        let r = matvec(&a, &x);
        for (ri, bi) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((ri - bi).abs() < 1e-12);
        }
        let y = lu.solve_transpose(&[1.0, 2.0, 3.0]);
        let at = a.transpose_view().to_csr();
        let r = matvec(&at, &y);
        for (ri, bi) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }
}
