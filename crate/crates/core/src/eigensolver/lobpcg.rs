//! Locally optimal block preconditioned conjugate gradient.
//!
//! Each iteration performs Rayleigh-Ritz on `[X, W, P]`, where `W` holds the
//! preconditioned residuals of the still-active columns and `P` the previous
//! search directions. Converged columns stay in `X` (soft locking) but stop
//! contributing residual directions. The trial basis is re-orthonormalized by
//! modified Gram-Schmidt run twice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dense::{dense_eig, DENSE_LIMIT};
use super::{EigenError, SpectralBasis, Which};
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LobpcgOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub which: Which,
}

impl Default for LobpcgOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, seed: 0, which: Which::Smallest }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Orthonormalizes `cols` against the orthonormal `basis` and among themselves.
/// Columns that collapse below `drop_tol` of their original norm are discarded.
fn orthonormalize_against(basis: &[Vec<f64>], cols: Vec<Vec<f64>>, drop_tol: f64) -> Vec<Vec<f64>> {
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut c in cols {
        let original = dot(&c, &c).sqrt();
        if original == 0.0 {
            continue;
        }
        for _pass in 0..2 {
            for b in basis.iter().chain(accepted.iter()) {
                let proj = dot(b, &c);
                axpy(-proj, b, &mut c);
            }
        }
        let norm = dot(&c, &c).sqrt();
        if norm > drop_tol * original {
            c.iter_mut().for_each(|v| *v /= norm);
            accepted.push(c);
        }
    }
    accepted
}

/// `Q^T A Q` for column blocks `q` and `aq = A q`, symmetrized.
fn projected(q: &[Vec<f64>], aq: &[Vec<f64>]) -> Vec<f64> {
    let m = q.len();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v = 0.5 * (dot(&q[i], &aq[j]) + dot(&q[j], &aq[i]));
            g[i * m + j] = v;
            g[j * m + i] = v;
        }
    }
    g
}

/// `sum_j block[j] * coeff[j, col]` for a row-major `m x cols` coefficient matrix.
fn combine(block: &[Vec<f64>], coeff: &[f64], cols: usize, col: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let n = block.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for j in rows {
        let c = coeff[j * cols + col];
        if c != 0.0 {
            axpy(c, &block[j], &mut out);
        }
    }
    out
}

fn select(values: &[f64], k: usize, which: Which) -> Vec<usize> {
    let m = values.len();
    match which {
        Which::Smallest => (0..k).collect(),
        Which::Largest => (m - k..m).collect(),
    }
}

fn residual_norms(a: &CsrMatrix, x: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(theta)
        .map(|(col, &t)| {
            let ax = a.matvec(col).expect("dimension checked");
            ax.iter().zip(col).map(|(p, q)| (p - t * q).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

fn dense_fallback(a: &CsrMatrix, k: usize, which: Which, graph_id: usize) -> Result<SpectralBasis, EigenError> {
    let n = a.dim();
    let eig = dense_eig(&a.to_dense(), n)?;
    let picked = select(&eig.values, k, which);
    let cols: Vec<Vec<f64>> = picked.iter().map(|&i| eig.vector(i)).collect();
    let theta: Vec<f64> = picked.iter().map(|&i| eig.values[i]).collect();
    let res = residual_norms(a, &cols, &theta);
    Ok(SpectralBasis::from_columns(graph_id, &cols, theta, res))
}

/// The `k` smallest (or largest) eigenpairs of a sparse symmetric matrix, ascending.
///
/// Falls back to the dense Jacobi solver when `k >= n` or `k > n / 4`.
/// Stops once every residual `||A u - lambda u||` is at most `tol`, or after
/// `max_iter` iterations, in which case the residuals reported are the actual ones.
pub fn lobpcg(a: &CsrMatrix, k: usize, opts: &LobpcgOptions) -> Result<SpectralBasis, EigenError> {
    lobpcg_for_graph(a, k, opts, 0)
}

pub(crate) fn lobpcg_for_graph(
    a: &CsrMatrix,
    k: usize,
    opts: &LobpcgOptions,
    graph_id: usize,
) -> Result<SpectralBasis, EigenError> {
    let n = a.dim();
    if k < 1 {
        return Err(EigenError::ZeroModes);
    }
    if k > n {
        return Err(EigenError::TooManyModes { k, n });
    }
    let asym = a.asymmetry();
    if asym > 1e-12 {
        return Err(EigenError::NonSymmetric(asym));
    }
    if k == n || 4 * k > n {
        if n > DENSE_LIMIT {
            return Err(EigenError::TooLarge { n, limit: DENSE_LIMIT });
        }
        return dense_fallback(a, k, opts.which, graph_id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let initial: Vec<Vec<f64>> =
        (0..k).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let mut x = orthonormalize_against(&[], initial, 1e-10);
    while x.len() < k {
        // Degenerate random draw; top up with fresh directions.
        let extra: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        x.extend(orthonormalize_against(&x, vec![extra], 1e-10));
    }
    let precond: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();

    let apply = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        cols.iter().map(|c| a.matvec(c).expect("dimension checked")).collect()
    };

    // Initial Rayleigh-Ritz on X alone.
    let mut ax = apply(&x);
    let g = projected(&x, &ax);
    let eig = dense_eig(&g, k)?;
    let mut theta = eig.values.clone();
    x = (0..k).map(|c| combine(&x, &eig.vectors, k, c, 0..k)).collect();
    ax = (0..k).map(|c| combine(&ax, &eig.vectors, k, c, 0..k)).collect();
    let mut p: Vec<Vec<f64>> = Vec::new();

    for _iter in 0..opts.max_iter {
        let residuals: Vec<Vec<f64>> = (0..k)
            .map(|i| ax[i].iter().zip(&x[i]).map(|(av, xv)| av - theta[i] * xv).collect())
            .collect();
        let norms: Vec<f64> = residuals.iter().map(|r| dot(r, r).sqrt()).collect();
        let active: Vec<usize> = (0..k).filter(|&i| norms[i] > opts.tol).collect();
        if active.is_empty() {
            break;
        }
        let w: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| residuals[i].iter().zip(&precond).map(|(r, t)| r * t).collect())
            .collect();
        let w = orthonormalize_against(&x, w, 1e-12);
        let mut basis: Vec<Vec<f64>> = x.clone();
        basis.extend(w);
        let p_active: Vec<Vec<f64>> =
            if p.is_empty() { Vec::new() } else { active.iter().map(|&i| p[i].clone()).collect() };
        let p_orth = orthonormalize_against(&basis, p_active, 1e-12);
        basis.extend(p_orth);

        let m = basis.len();
        let mut abasis = ax.clone();
        abasis.extend(apply(&basis[k..]));
        let g = projected(&basis, &abasis);
        let eig = dense_eig(&g, m)?;
        let picked = select(&eig.values, k, opts.which);
        let mut coeff = vec![0.0; m * k];
        for (c, &idx) in picked.iter().enumerate() {
            for r in 0..m {
                coeff[r * k + c] = eig.vectors[r * m + idx];
            }
        }
        theta = picked.iter().map(|&i| eig.values[i]).collect();
        x = (0..k).map(|c| combine(&basis, &coeff, k, c, 0..m)).collect();
        ax = (0..k).map(|c| combine(&abasis, &coeff, k, c, 0..m)).collect();
        p = (0..k).map(|c| combine(&basis, &coeff, k, c, k..m)).collect();
    }

    // Final orthonormal cleanup and Ritz values in ascending order.
    let x = orthonormalize_against(&[], x, 0.0);
    let ax = apply(&x);
    let g = projected(&x, &ax);
    let eig = dense_eig(&g, k)?;
    let cols: Vec<Vec<f64>> = (0..k).map(|c| combine(&x, &eig.vectors, k, c, 0..k)).collect();
    let theta = eig.values;
    let res = residual_norms(a, &cols, &theta);
    Ok(SpectralBasis::from_columns(graph_id, &cols, theta, res))
}
