//! Dense row-major matrices and a cyclic Jacobi eigensolver for symmetric input.

use super::ClusterError;

/// Maximum number of full Jacobi sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Sweeps stop once the off-diagonal Frobenius norm drops below this
/// fraction of `‖M‖_F`.
pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ClusterError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(ClusterError::Shape { expected: cols, found: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self, ClusterError> {
        if self.cols != other.rows {
            return Err(ClusterError::Shape { expected: self.cols, found: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j {
                    sum += self[(i, j)] * self[(i, j)];
                }
            }
        }
        sum.sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigenvalues in ascending order; column `k` of `vectors` pairs with `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations on a symmetric matrix.
///
/// Each eigenvector's largest-magnitude component is made nonnegative so the
/// output is reproducible.
pub fn symmetric_eig(m: &Matrix) -> Result<Eigen, ClusterError> {
    let n = m.rows();
    if m.cols() != n {
        return Err(ClusterError::Shape { expected: n, found: m.cols() });
    }
    let norm = m.frobenius_norm();
    if !norm.is_finite() {
        return Err(ClusterError::Numeric("matrix has non-finite entries".into()));
    }
    if m.max_asymmetry() > 1e-12 * norm.max(1.0) {
        return Err(ClusterError::NotSymmetric);
    }

    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let threshold = OFF_DIAGONAL_TOLERANCE * norm;
    let mut converged = false;

    for _sweep in 0..MAX_SWEEPS {
        if a.off_diagonal_norm() <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        let new_kp = c * akp - s * akq;
                        let new_kq = s * akp + c * akq;
                        a[(k, p)] = new_kp;
                        a[(p, k)] = new_kp;
                        a[(k, q)] = new_kq;
                        a[(q, k)] = new_kq;
                    }
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && a.off_diagonal_norm() > threshold {
        return Err(ClusterError::Numeric(format!("Jacobi did not converge in {MAX_SWEEPS} sweeps")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..n {
            if v[(k, src)].abs() > v[(pivot, src)].abs() {
                pivot = k;
            }
        }
        let sign = if v[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, dst)] = sign * v[(k, src)];
        }
    }
    Ok(Eigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    fn reconstruct(e: &Eigen) -> Matrix {
        let n = e.values.len();
        let lambda = Matrix::from_fn(n, n, |i, j| if i == j { e.values[i] } else { 0.0 });
        e.vectors.matmul(&lambda).unwrap().matmul(&e.vectors.transpose()).unwrap()
    }

    #[test]
    fn identity_and_diagonal() {
        let e = symmetric_eig(&Matrix::identity(4)).unwrap();
        assert_eq!(e.values, vec![1.0; 4]);
        let d = Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]])
            .unwrap();
        let e = symmetric_eig(&d).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.vectors.column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_hand_case() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eig(&m).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[(0, 1)] - h).abs() < 1e-14 && (e.vectors[(1, 1)] - h).abs() < 1e-14);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        for seed in 0..5 {
            let m = random_symmetric(30, seed);
            let e = symmetric_eig(&m).unwrap();
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            let err = Matrix::from_fn(30, 30, |i, j| m[(i, j)] - reconstruct(&e)[(i, j)]);
            assert!(err.frobenius_norm() <= 1e-8 * m.frobenius_norm());
            let gram = e.vectors.transpose().matmul(&e.vectors).unwrap();
            let off = Matrix::from_fn(30, 30, |i, j| gram[(i, j)] - if i == j { 1.0 } else { 0.0 });
            assert!(off.frobenius_norm() < 1e-10);
        }
    }

    #[test]
    fn agrees_with_nalgebra() {
        let m = random_symmetric(12, 99);
        let ours = symmetric_eig(&m).unwrap();
        let theirs = nalgebra::DMatrix::from_fn(12, 12, |i, j| m[(i, j)]).symmetric_eigen();
        let mut reference: Vec<f64> = theirs.eigenvalues.iter().copied().collect();
        reference.sort_by(f64::total_cmp);
        for (a, b) in ours.values.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(symmetric_eig(&m).unwrap_err(), ClusterError::NotSymmetric);
    }

    #[test]
    fn sign_convention_is_applied() {
        let m = random_symmetric(8, 3);
        let e = symmetric_eig(&m).unwrap();
        for k in 0..8 {
            let col = e.vectors.column(k);
            let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(pivot > 0.0);
        }
    }
}
