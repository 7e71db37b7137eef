//! Cyclic Jacobi rotations for dense symmetric matrices.

use super::EigenError;

/// Largest matrix accepted by [`dense_eig`].
pub const DENSE_LIMIT: usize = 512;

/// Full eigendecomposition with eigenvalues ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseEig {
    pub n: usize,
    pub values: Vec<f64>,
    /// Row-major `n x n`; column `i` is the eigenvector of `values[i]`.
    pub vectors: Vec<f64>,
}

impl DenseEig {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.vectors[r * self.n + i]).collect()
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Eigendecomposition of a dense symmetric row-major `n x n` matrix.
///
/// Sweeps until the off-diagonal Frobenius norm is at most `1e-12 * max(1, ||A||_F)`.
pub fn dense_eig(matrix: &[f64], n: usize) -> Result<DenseEig, EigenError> {
    if n > DENSE_LIMIT {
        return Err(EigenError::TooLarge { n, limit: DENSE_LIMIT });
    }
    if matrix.len() != n * n {
        return Err(EigenError::DimensionMismatch { expected: n * n, got: matrix.len() });
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((matrix[i * n + j] - matrix[j * n + i]).abs());
        }
    }
    if asym > 1e-12 {
        return Err(EigenError::NonSymmetric(asym));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = 1e-12 * frob.max(1.0);
    for _sweep in 0..100 {
        if off_diagonal_norm(&a, n) <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new] = v[r * n + old];
        }
    }
    Ok(DenseEig { n, values, vectors })
}
