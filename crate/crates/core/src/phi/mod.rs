//! The spectral electrostatics plugin.
//!
//! After every message-passing layer an α-Net maps node features to two sets of
//! per-graph spectral coefficients. Potential and charge are accumulated as
//! `phi += U alpha_phi` and `rho += U Lambda alpha_rho` in the Laplacian
//! eigenbasis, which yields a Poisson residual `||L phi - rho||`, a net-charge
//! penalty `|sum rho|`, and the electrostatic energy `rho^T phi / 2`.

mod alpha_net;
mod state;

pub use alpha_net::{alpha_net_eval, alpha_net_forward, AlphaNetParams, AlphaVars};
pub use state::{electrostatic_energy, net_charge_penalty, PhiState};

use std::ops::Range;
use std::rc::Rc;

use thiserror::Error;

use crate::eigensolver::{SpectralBasis, Which};
use crate::sparse::CsrMatrix;
use crate::tensor::{BlockColumns, Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhiError {
    #[error("coefficient length {got} does not match {expected} modes")]
    ModeMismatch { expected: usize, got: usize },
    #[error("state has {state} nodes but basis has {basis}")]
    NodeMismatch { state: usize, basis: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Φ-Module hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiConfig {
    /// Number of Laplacian modes.
    pub k: usize,
    /// Weight of the Poisson residual in the training objective.
    pub beta: f64,
    /// Weight of the net-charge penalty.
    pub gamma: f64,
    /// α-Net convolution width along the node axis (odd).
    pub kernel_size: usize,
    /// α-Net internal width; `None` means half the host feature width.
    pub hidden_channels: Option<usize>,
    pub which: Which,
    /// Cutoff of the graph the Laplacian is built on; `None` reuses the host cutoff.
    /// Since `W_ij = d_ij`, a pair crossing a finite cutoff changes the energy by a
    /// step; `f64::INFINITY` gives the complete graph and a smooth energy.
    pub laplacian_cutoff: Option<f64>,
}

impl Default for PhiConfig {
    fn default() -> Self {
        Self {
            k: 9,
            beta: 1e-4,
            gamma: 1e-4,
            kernel_size: 1,
            hidden_channels: None,
            which: Which::Smallest,
            laplacian_cutoff: None,
        }
    }
}

impl PhiConfig {
    pub fn validate(&self) -> Result<(), PhiError> {
        if self.k < 1 {
            return Err(PhiError::Config("k must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(PhiError::Config("beta and gamma must be non-negative".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(PhiError::Config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if let Some(c) = self.laplacian_cutoff {
            if !(c > 0.0) {
                return Err(PhiError::Config(format!("laplacian_cutoff {c} must be positive")));
            }
        }
        if self.hidden_channels == Some(0) {
            return Err(PhiError::Config("hidden_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self, host_features: usize) -> usize {
        self.hidden_channels.unwrap_or((host_features / 2).max(1))
    }
}

/// Constant spectral data of a batch, shaped for the tape.
#[derive(Clone, Debug)]
pub struct SpectralContext {
    /// `U` per graph.
    pub u: Rc<BlockColumns>,
    /// `U Lambda` per graph.
    pub u_lambda: Rc<BlockColumns>,
    /// Block-diagonal Laplacian of the batch.
    pub laplacian: Rc<CsrMatrix>,
    /// Eigenvalues per graph, zero-padded to `k` columns (`G x k`, row-major).
    pub lambda_padded: Vec<f64>,
    pub k: usize,
}

impl SpectralContext {
    pub fn new(bases: &[SpectralBasis], laplacians: &[&CsrMatrix], offsets: &[Range<usize>], k: usize) -> Self {
        let total: usize = offsets.last().map_or(0, |r| r.end);
        let mut u = Vec::with_capacity(bases.len());
        let mut ul = Vec::with_capacity(bases.len());
        let mut lambda_padded = vec![0.0; bases.len() * k];
        for (g, (basis, range)) in bases.iter().zip(offsets).enumerate() {
            u.push(basis.to_block(range.start));
            let mut scaled = basis.vectors.clone();
            for r in 0..basis.n {
                for i in 0..basis.k {
                    scaled[r * basis.k + i] *= basis.eigenvalues[i];
                }
            }
            ul.push(crate::tensor::DenseBlock { offset: range.start, rows: basis.n, cols: basis.k, data: scaled });
            lambda_padded[g * k..g * k + basis.k].copy_from_slice(&basis.eigenvalues);
        }
        let mut triplets = Vec::new();
        for (l, range) in laplacians.iter().zip(offsets) {
            for i in 0..l.dim() {
                for (j, v) in l.row(i) {
                    triplets.push((range.start + i, range.start + j, v));
                }
            }
        }
        let laplacian = CsrMatrix::from_triplets(total, &triplets).expect("offsets cover every block");
        Self {
            u: Rc::new(BlockColumns { blocks: u, total_rows: total }),
            u_lambda: Rc::new(BlockColumns { blocks: ul, total_rows: total }),
            laplacian: Rc::new(laplacian),
            lambda_padded,
            k,
        }
    }
}

/// Node-space and spectral accumulators on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PhiTapeState {
    pub phi: Var,
    pub rho: Var,
    pub alpha_phi_acc: Var,
    pub alpha_rho_acc: Var,
}

/// One accumulation step. With no previous state this is the first-layer assignment
/// `phi = U alpha_phi`, `rho = U Lambda alpha_rho`.
pub fn accumulate_on_tape(
    tape: &Tape,
    ctx: &SpectralContext,
    prev: Option<PhiTapeState>,
    alpha_phi: Var,
    alpha_rho: Var,
) -> Result<PhiTapeState, TensorError> {
    let dphi = tape.block_expand(alpha_phi, ctx.u.clone())?;
    let drho = tape.block_expand(alpha_rho, ctx.u_lambda.clone())?;
    Ok(match prev {
        None => PhiTapeState { phi: dphi, rho: drho, alpha_phi_acc: alpha_phi, alpha_rho_acc: alpha_rho },
        Some(s) => PhiTapeState {
            phi: tape.add(s.phi, dphi)?,
            rho: tape.add(s.rho, drho)?,
            alpha_phi_acc: tape.add(s.alpha_phi_acc, alpha_phi)?,
            alpha_rho_acc: tape.add(s.alpha_rho_acc, alpha_rho)?,
        },
    })
}

/// Per-graph Φ outputs, each `G x 1`.
#[derive(Clone, Copy, Debug)]
pub struct PhiTerms {
    /// `rho^T phi / 2`.
    pub electrostatic: Var,
    /// `||L phi - rho||_2`.
    pub residual: Var,
    /// `|sum_i rho_i|`.
    pub net_charge: Var,
}

pub fn phi_terms(
    tape: &Tape,
    ctx: &SpectralContext,
    state: &PhiTapeState,
    graph_index: Rc<[usize]>,
    n_graphs: usize,
) -> Result<PhiTerms, TensorError> {
    let prod = tape.mul(state.rho, state.phi)?;
    let es = tape.scale(tape.scatter_add_rows(prod, graph_index.clone(), n_graphs)?, 0.5)?;
    let lphi = tape.sparse_matmul(ctx.laplacian.clone(), state.phi)?;
    let r = tape.sub(lphi, state.rho)?;
    let residual = tape.segment_norm(r, graph_index.clone(), n_graphs)?;
    let charge = tape.scatter_add_rows(state.rho, graph_index, n_graphs)?;
    let net_charge = tape.abs(charge)?;
    Ok(PhiTerms { electrostatic: es, residual, net_charge })
}

/// `sum_i lambda_i alpha_rho_i alpha_phi_i / 2` per graph, with `lambda` given as a `G x k` var.
pub fn spectral_electrostatic(
    tape: &Tape,
    lambda: Var,
    state: &PhiTapeState,
) -> Result<Var, TensorError> {
    let k = tape.value(lambda).cols();
    let weighted = tape.mul(tape.mul(lambda, state.alpha_rho_acc)?, state.alpha_phi_acc)?;
    let ones = tape.constant(crate::tensor::Tensor::column(vec![1.0; k]))?;
    tape.scale(tape.matmul(weighted, ones)?, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(PhiConfig::default().validate().is_ok());
        assert!(PhiConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(PhiConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(PhiConfig { gamma: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(PhiConfig { kernel_size: 2, ..Default::default() }.validate().is_err());
        assert_eq!(PhiConfig::default().hidden(64), 32);
    }
}
