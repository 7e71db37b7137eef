use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::RadiusGraph;
use crate::sparse::{CsrMatrix, SparseError};

#[derive(Debug, Error, PartialEq)]
pub enum LaplacianError {
    #[error("edge {edge} has negative distance {distance}")]
    NegativeDistance { edge: usize, distance: f64 },
    #[error("edge ({0}, {1}) has no reverse edge")]
    Asymmetric(usize, usize),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// `L = I - D^{-1/2} W D^{-1/2}` with `W_ij = d_ij` over the graph edges.
///
/// Isolated atoms get an all-zero row and column, which keeps `L` positive
/// semidefinite with the constant-vector kernel.
pub fn build_weighted_laplacian(g: &RadiusGraph) -> Result<CsrMatrix, LaplacianError> {
    let n = g.n_nodes;
    let mut degree = vec![0.0; n];
    for (e, (&(i, j), &d)) in g.edges.iter().zip(&g.distances).enumerate() {
        if d < 0.0 {
            return Err(LaplacianError::NegativeDistance { edge: e, distance: d });
        }
        if g.edges.binary_search(&(j, i)).is_err() {
            return Err(LaplacianError::Asymmetric(i, j));
        }
        degree[i] += d;
    }
    let mut triplets = Vec::with_capacity(g.edges.len() + n);
    for (i, &deg) in degree.iter().enumerate() {
        if deg > 0.0 {
            triplets.push((i, i, 1.0));
        }
    }
    for (&(i, j), &d) in g.edges.iter().zip(&g.distances) {
        let denom = (degree[i] * degree[j]).sqrt();
        if denom > 0.0 {
            triplets.push((i, j, -d / denom));
        }
    }
    Ok(CsrMatrix::from_triplets(n, &triplets)?)
}

/// Per-graph Laplacian blocks of a batch, addressed by node offset ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedLaplacian {
    pub blocks: Vec<CsrMatrix>,
    pub offsets: Vec<Range<usize>>,
}

impl BatchedLaplacian {
    pub fn n_nodes(&self) -> usize {
        self.offsets.last().map_or(0, |r| r.end)
    }

    pub fn n_graphs(&self) -> usize {
        self.blocks.len()
    }

    /// `y = L x` over the whole batch, one block at a time.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.n_nodes() {
            return Err(SparseError::DimensionMismatch { expected: self.n_nodes(), got: x.len() });
        }
        let mut y = vec![0.0; x.len()];
        for (block, range) in self.blocks.iter().zip(&self.offsets) {
            block.matvec_into(&x[range.clone()], &mut y[range.clone()]);
        }
        Ok(y)
    }

    /// Physically assembled block-diagonal matrix, row-major.
    pub fn assemble_dense(&self) -> Vec<f64> {
        let n = self.n_nodes();
        let mut dense = vec![0.0; n * n];
        for (block, range) in self.blocks.iter().zip(&self.offsets) {
            for i in 0..block.dim() {
                for (j, v) in block.row(i) {
                    dense[(range.start + i) * n + range.start + j] = v;
                }
            }
        }
        dense
    }
}

/// Groups square blocks into a batch without concatenating them.
pub fn block_diag_batch(mats: Vec<CsrMatrix>) -> BatchedLaplacian {
    let mut offsets = Vec::with_capacity(mats.len());
    let mut start = 0;
    for m in &mats {
        offsets.push(start..start + m.dim());
        start += m.dim();
    }
    BatchedLaplacian { blocks: mats, offsets }
}

/// Dense random symmetric PSD matrix with spectrum inside `[0, 2]`.
///
/// Stands in for the physical Laplacian in the random-matrix ablation.
pub fn random_symmetric_psd<R: Rng>(n: usize, rng: &mut R) -> CsrMatrix {
    let a: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    // Gershgorin bound on the largest eigenvalue.
    let bound = (0..n).map(|i| m[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    if bound > 0.0 {
        m.iter_mut().for_each(|v| *v *= 2.0 / bound);
    }
    CsrMatrix::from_dense(n, &m).expect("square by construction")
}
