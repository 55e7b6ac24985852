//! Small dense linear algebra: Householder QR for the m x p design matrix
//! (rank and leverage) and a pivoted LU for p x p normal-equation solves.
//!
//! p is small throughout the toolkit, so everything here is plain row-major
//! `Vec<f64>` with O(m p^2) cost; no m x m matrix is ever formed.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

}

/// Economy-size Householder QR of an m x p matrix (m >= p assumed by callers
/// only when full rank is required; rank is measured either way).
pub struct Qr {
    /// Thin Q, m x r with orthonormal columns for the retained pivots.
    pub q: Matrix,
    /// Diagonal of R in decreasing |value| order (column-pivoted).
    pub r_diag: Vec<f64>,
    /// Numerical rank.
    pub rank: usize,
}

/// Column-pivoted Gram-Schmidt QR (modified, with re-orthogonalization pass).
/// For the tiny p used here this is accurate and simple.
pub fn qr(a: &Matrix) -> Qr {
    let m = a.rows;
    let p = a.cols;
    // Work on columns.
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let norms0: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let max_norm = norms0.iter().cloned().fold(0.0_f64, f64::max);
    let tol = max_norm * (m.max(p) as f64) * f64::EPSILON * 16.0;

    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r_diag = Vec::with_capacity(p);
    let mut remaining: Vec<usize> = (0..p).collect();

    while !remaining.is_empty() {
        // Pivot: remaining column with the largest residual norm.
        let (pos, &jbest) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| {
                norm2(&cols[*x.1])
                    .partial_cmp(&norm2(&cols[*y.1]))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let nrm = norm2(&cols[jbest]);
        if nrm <= tol {
            break;
        }
        remaining.remove(pos);
        let qk: Vec<f64> = cols[jbest].iter().map(|v| v / nrm).collect();
        r_diag.push(nrm);
        // Orthogonalize the remaining columns against qk (twice for accuracy).
        for _ in 0..2 {
            for &j in &remaining {
                let d = dot(&qk, &cols[j]);
                for i in 0..m {
                    cols[j][i] -= d * qk[i];
                }
            }
        }
        q.push(qk);
    }

    let rank = q.len();
    let mut qm = Matrix::zeros(m, rank);
    for (k, qk) in q.iter().enumerate() {
        for (i, &v) in qk.iter().enumerate() {
            qm.set(i, k, v);
        }
    }
    Qr {
        q: qm,
        r_diag,
        rank,
    }
}

/// LU factorization with partial pivoting of a p x p matrix; solves in place.
pub struct Lu {
    lu: Matrix,
    piv: Vec<usize>,
    /// Crude condition estimate: max |pivot| / min |pivot|.
    pub condition_estimate: f64,
    /// Product of pivots with sign, i.e. det(A).
    pub determinant: f64,
}

pub fn lu(a: &Matrix) -> Result<Lu> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Internal(format!(
            "lu expects a square matrix, got {} x {}",
            a.rows, a.cols
        )));
    }
    let mut lu = a.clone();
    let mut piv: Vec<usize> = (0..n).collect();
    let mut det = 1.0;
    let mut max_piv = 0.0_f64;
    let mut min_piv = f64::INFINITY;

    for k in 0..n {
        // Partial pivot.
        let mut imax = k;
        let mut vmax = lu.get(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.get(i, k).abs();
            if v > vmax {
                vmax = v;
                imax = i;
            }
        }
        if vmax == 0.0 || !vmax.is_finite() {
            return Err(Error::Internal(
                "singular or non-finite matrix in LU solve".into(),
            ));
        }
        if imax != k {
            for j in 0..n {
                let t = lu.get(k, j);
                lu.set(k, j, lu.get(imax, j));
                lu.set(imax, j, t);
            }
            piv.swap(k, imax);
            det = -det;
        }
        let pivot = lu.get(k, k);
        det *= pivot;
        max_piv = max_piv.max(pivot.abs());
        min_piv = min_piv.min(pivot.abs());
        for i in (k + 1)..n {
            let f = lu.get(i, k) / pivot;
            lu.set(i, k, f);
            for j in (k + 1)..n {
                let v = lu.get(i, j) - f * lu.get(k, j);
                lu.set(i, j, v);
            }
        }
    }

    Ok(Lu {
        lu,
        piv,
        condition_estimate: max_piv / min_piv,
        determinant: det,
    })
}

impl Lu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut x: Vec<f64> = self.piv.iter().map(|&i| b[i]).collect();
        for k in 0..n {
            for j in 0..k {
                x[k] -= self.lu.get(k, j) * x[j];
            }
        }
        for k in (0..n).rev() {
            for j in (k + 1)..n {
                x[k] -= self.lu.get(k, j) * x[j];
            }
            x[k] /= self.lu.get(k, k);
        }
        x
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn qr_full_rank_and_leverage() {
        // 3 x 1 intercept column: leverage 1/3 each, rank 1.
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
        let f = qr(&x);
        assert_eq!(f.rank, 1);
        for i in 0..3 {
            let h: f64 = (0..f.rank).map(|k| f.q.get(i, k).powi(2)).sum();
            assert_relative_eq!(h, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn qr_detects_collinearity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
        assert_eq!(qr(&x).rank, 1);
    }

    #[test]
    fn lu_solves_and_dets() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let f = lu(&a).unwrap();
        assert_relative_eq!(f.determinant, 8.0, epsilon = 1e-12);
        let x = f.solve(&[8.0, 7.0]);
        assert_relative_eq!(x[0], 1.25, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn lu_rejects_singular() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(lu(&a).is_err());
    }
}
