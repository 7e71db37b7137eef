//! Partial eigendecomposition of batched Laplacians.

mod dense;
mod lobpcg;

pub use dense::{dense_eig, DenseEig, DENSE_LIMIT};
pub use lobpcg::{lobpcg, LobpcgOptions};

use rayon::prelude::*;
use thiserror::Error;

use crate::molgraph::BatchedLaplacian;
use crate::tensor::DenseBlock;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigenError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("at least one mode must be requested")]
    ZeroModes,
    #[error("requested {k} modes from a {n}x{n} matrix")]
    TooManyModes { k: usize, n: usize },
    #[error("dense solver limited to n <= {limit}, got {n}")]
    TooLarge { n: usize, limit: usize },
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
}

/// Which end of the spectrum to extract.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Which {
    #[default]
    Smallest,
    Largest,
}

/// Eigenpairs of one graph's Laplacian: `vectors` is row-major `n x k` with
/// orthonormal columns, `eigenvalues` ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    pub graph_id: usize,
    pub n: usize,
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    pub vectors: Vec<f64>,
    pub residual_norms: Vec<f64>,
}

impl SpectralBasis {
    pub(crate) fn from_columns(graph_id: usize, cols: &[Vec<f64>], eigenvalues: Vec<f64>, residual_norms: Vec<f64>) -> Self {
        let k = cols.len();
        let n = cols.first().map_or(0, Vec::len);
        let mut vectors = vec![0.0; n * k];
        for (c, col) in cols.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                vectors[r * k + c] = *v;
            }
        }
        Self { graph_id, n, k, eigenvalues, vectors, residual_norms }
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.vectors[r * self.k + i]).collect()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.vectors[row * self.k + col]
    }

    /// `max |U^T U - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.k {
            for j in 0..self.k {
                let d: f64 = (0..self.n).map(|r| self.at(r, i) * self.at(r, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    pub fn max_residual(&self) -> f64 {
        self.residual_norms.iter().copied().fold(0.0, f64::max)
    }

    /// `U alpha` for `alpha` of length `k`.
    pub fn expand(&self, alpha: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| (0..self.k).map(|i| self.at(r, i) * alpha[i]).sum()).collect()
    }

    /// `U^T x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k).map(|i| (0..self.n).map(|r| self.at(r, i) * x[r]).sum()).collect()
    }

    /// Flips the sign of column `i`.
    pub fn flip_column(&mut self, i: usize) {
        for r in 0..self.n {
            self.vectors[r * self.k + i] = -self.vectors[r * self.k + i];
        }
    }

    /// Replaces columns `cols` by `cols * Q` for an orthogonal `Q` (row-major `m x m`).
    pub fn rotate_columns(&mut self, cols: &[usize], q: &[f64]) {
        let m = cols.len();
        for r in 0..self.n {
            let old: Vec<f64> = cols.iter().map(|&c| self.at(r, c)).collect();
            for (b, &c) in cols.iter().enumerate() {
                self.vectors[r * self.k + c] = (0..m).map(|a| old[a] * q[a * m + b]).sum();
            }
        }
    }

    pub fn to_block(&self, offset: usize) -> DenseBlock {
        DenseBlock { offset, rows: self.n, cols: self.k, data: self.vectors.clone() }
    }

    /// Groups of column indices whose eigenvalues differ by at most `tol` from their neighbor.
    pub fn clusters(&self, tol: f64) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for i in 0..self.k {
            match out.last_mut() {
                Some(last) if self.eigenvalues[i] - self.eigenvalues[*last.last().unwrap()] <= tol => last.push(i),
                _ => out.push(vec![i]),
            }
        }
        out
    }
}

/// Per-block partial decompositions with `k_eff = min(k, n)` modes each.
///
/// Blocks are solved independently; with `parallel` they are distributed over
/// the rayon pool, which does not change any result.
pub fn batched_spectral_basis(
    batch: &BatchedLaplacian,
    k: usize,
    opts: &LobpcgOptions,
    parallel: bool,
) -> Result<Vec<SpectralBasis>, EigenError> {
    if k < 1 {
        return Err(EigenError::ZeroModes);
    }
    let solve = |(g, block): (usize, &crate::sparse::CsrMatrix)| {
        if block.dim() == 0 {
            return Err(EigenError::EmptyGraph(g));
        }
        let k_eff = k.min(block.dim());
        let mut o = *opts;
        o.seed = opts.seed.wrapping_add(g as u64);
        lobpcg::lobpcg_for_graph(block, k_eff, &o, g)
    };
    if parallel {
        batch.blocks.par_iter().enumerate().map(solve).collect()
    } else {
        batch.blocks.iter().enumerate().map(solve).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{block_diag_batch, build_radius_graph, build_weighted_laplacian, AtomicSystem};
    use crate::sparse::CsrMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_laplacian(rng: &mut ChaCha8Rng, n: usize) -> CsrMatrix {
        let side = 2.2 * (n as f64).cbrt();
        let pos = (0..n).map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)]);
        let sys = AtomicSystem::new(pos.collect(), vec![6; n]).unwrap();
        build_weighted_laplacian(&build_radius_graph(&sys, 3.0, 50)).unwrap()
    }

    #[test]
    fn two_atom_pairs() {
        let l = CsrMatrix::from_dense(2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let b = lobpcg(&l, 2, &LobpcgOptions::default()).unwrap();
        assert!(b.eigenvalues[0].abs() < 1e-14);
        assert!((b.eigenvalues[1] - 2.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.at(0, 0).abs() - s).abs() < 1e-14 && (b.at(0, 0) - b.at(1, 0)).abs() < 1e-14);
        assert!((b.at(0, 1) + b.at(1, 1)).abs() < 1e-14);
    }

    #[test]
    fn null_operator() {
        for n in [1, 5, 12] {
            let b = lobpcg(&CsrMatrix::zeros(n), 1, &LobpcgOptions::default()).unwrap();
            assert_eq!(b.eigenvalues.len(), 1);
            assert!(b.eigenvalues[0].abs() < 1e-15);
        }
    }

    #[test]
    fn matches_dense_oracle_on_64_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let l = random_laplacian(&mut rng, 64);
        let b = lobpcg(&l, 8, &LobpcgOptions::default()).unwrap();
        let dense = dense_eig(&l.to_dense(), 64).unwrap();
        for i in 0..8 {
            assert!((b.eigenvalues[i] - dense.values[i]).abs() <= 1e-8, "mode {i}");
        }
        assert!(b.orthonormality_error() <= 1e-8);
        assert!(b.max_residual() <= 1e-8);
    }

    #[test]
    fn largest_modes_option() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let l = random_laplacian(&mut rng, 40);
        let opts = LobpcgOptions { which: Which::Largest, ..Default::default() };
        let b = lobpcg(&l, 4, &opts).unwrap();
        let dense = dense_eig(&l.to_dense(), 40).unwrap();
        for i in 0..4 {
            assert!((b.eigenvalues[i] - dense.values[36 + i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn errors() {
        let l = CsrMatrix::from_dense(2, &[1.0, -1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(lobpcg(&l, 1, &LobpcgOptions::default()), Err(EigenError::NonSymmetric(_))));
        assert_eq!(lobpcg(&CsrMatrix::zeros(2), 0, &LobpcgOptions::default()), Err(EigenError::ZeroModes));
    }

    #[test]
    fn batch_clamps_and_matches_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let l1 = random_laplacian(&mut rng, 30);
        let batch = block_diag_batch(vec![l1.clone(), CsrMatrix::zeros(1), l1]);
        let bases = batched_spectral_basis(&batch, 5, &LobpcgOptions::default(), false).unwrap();
        assert_eq!(bases[1].k, 1);
        assert!(bases[1].eigenvalues[0].abs() < 1e-15);
        for i in 0..5 {
            assert!((bases[0].eigenvalues[i] - bases[2].eigenvalues[i]).abs() < 1e-10);
        }
        let parallel = batched_spectral_basis(&batch, 5, &LobpcgOptions::default(), true).unwrap();
        assert_eq!(parallel, bases);
    }

    #[test]
    fn clusters_group_close_values() {
        let b = SpectralBasis {
            graph_id: 0,
            n: 3,
            k: 3,
            eigenvalues: vec![0.0, 1.5, 1.5 + 1e-12],
            vectors: vec![0.0; 9],
            residual_norms: vec![0.0; 3],
        };
        assert_eq!(b.clusters(1e-8), vec![vec![0], vec![1, 2]]);
    }
}
