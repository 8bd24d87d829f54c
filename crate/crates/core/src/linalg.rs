//! Small dense symmetric-positive-definite linear algebra.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of an SPD matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(matrix: &[f64], dim: usize) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Shape(format!("expected {dim}x{dim} matrix, got {} entries", matrix.len())));
        }
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = matrix[i * dim + j];
                for k in 0..j {
                    sum -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::Numerical(format!("matrix is not positive definite (pivot {i} = {sum:e})")));
                    }
                    l[i * dim + i] = sum.sqrt();
                } else {
                    l[i * dim + j] = sum / l[j * dim + j];
                }
            }
        }
        Ok(Cholesky { dim, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| self.lower[i * self.dim + i].ln()).sum::<f64>() * 2.0
    }

    /// Solves `L y = b` in place.
    fn forward_sub(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
    }

    /// Solves `L^T x = y` in place.
    fn backward_sub(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.lower[k * n + i] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_sub(&mut x);
        self.backward_sub(&mut x);
        x
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.forward_sub(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// Dense inverse, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        // symmetrize rounding noise
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
                inv[i * n + j] = m;
                inv[j * n + i] = m;
            }
        }
        inv
    }
}

/// `y = A x` for a row-major square matrix.
pub fn mat_vec(matrix: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| matrix[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Mean vector and (biased, divide-by-n) covariance of the rows.
pub fn mean_and_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / n;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

/// Ridge magnitude used throughout: a small multiple of the mean diagonal
/// variance, floored so fully degenerate data still yields an SPD matrix.
pub fn ridge_for(cov: &[f64], dim: usize) -> f64 {
    let mean_var = (0..dim).map(|i| cov[i * dim + i]).sum::<f64>() / dim as f64;
    (RIDGE_SCALE * mean_var).max(RIDGE_FLOOR)
}

pub const RIDGE_SCALE: f64 = 1e-4;
pub const RIDGE_FLOOR: f64 = 1e-10;

pub fn add_ridge(cov: &mut [f64], dim: usize, ridge: f64) {
    for i in 0..dim {
        cov[i * dim + i] += ridge;
    }
}

/// Factorizes `cov`, adding ridge until the factorization succeeds.
pub fn factor_with_fallback(cov: &mut [f64], dim: usize, ridge: f64) -> Result<Cholesky> {
    let mut extra = ridge.max(RIDGE_FLOOR);
    for _ in 0..12 {
        match Cholesky::factor(cov, dim) {
            Ok(c) => return Ok(c),
            Err(_) => {
                add_ridge(cov, dim, extra);
                extra *= 10.0;
            }
        }
    }
    Cholesky::factor(cov, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let c = Cholesky::factor(&a, 2).unwrap();
        let x = c.solve(&[2.0, 1.0]);
        let back = mat_vec(&a, &x);
        assert!((back[0] - 2.0).abs() < 1e-12 && (back[1] - 1.0).abs() < 1e-12);
        assert!((c.log_det() - 8f64.ln()).abs() < 1e-12);
        let q = c.quad_form(&[2.0, 1.0]);
        assert!((q - (2.0 * x[0] + x[1])).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        assert!(Cholesky::factor(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = [2.0, 0.5, 0.1, 0.5, 1.5, 0.2, 0.1, 0.2, 1.0];
        let inv = Cholesky::factor(&a, 3).unwrap().inverse();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
