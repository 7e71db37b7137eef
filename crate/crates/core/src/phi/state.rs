//! Value-level Φ state of a single graph.

use super::PhiError;
use crate::eigensolver::SpectralBasis;
use crate::sparse::CsrMatrix;

/// Potential and charge in node space together with the accumulated spectral
/// coefficients they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiState {
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub alpha_phi_acc: Vec<f64>,
    pub alpha_rho_acc: Vec<f64>,
    pub layers: usize,
}

impl PhiState {
    pub fn new(n: usize, k: usize) -> Self {
        Self { phi: vec![0.0; n], rho: vec![0.0; n], alpha_phi_acc: vec![0.0; k], alpha_rho_acc: vec![0.0; k], layers: 0 }
    }

    /// `phi += U alpha_phi`, `rho += U Lambda alpha_rho`.
    pub fn accumulate(&mut self, basis: &SpectralBasis, alpha_phi: &[f64], alpha_rho: &[f64]) -> Result<(), PhiError> {
        if basis.n != self.phi.len() {
            return Err(PhiError::NodeMismatch { state: self.phi.len(), basis: basis.n });
        }
        for a in [alpha_phi, alpha_rho] {
            if a.len() != basis.k || self.alpha_phi_acc.len() != basis.k {
                return Err(PhiError::ModeMismatch { expected: basis.k, got: a.len() });
            }
        }
        let scaled: Vec<f64> = alpha_rho.iter().zip(&basis.eigenvalues).map(|(a, l)| a * l).collect();
        for (p, d) in self.phi.iter_mut().zip(basis.expand(alpha_phi)) {
            *p += d;
        }
        for (r, d) in self.rho.iter_mut().zip(basis.expand(&scaled)) {
            *r += d;
        }
        for i in 0..basis.k {
            self.alpha_phi_acc[i] += alpha_phi[i];
            self.alpha_rho_acc[i] += alpha_rho[i];
        }
        self.layers += 1;
        Ok(())
    }

    /// `||L phi - rho||_2` in node space. Debug builds cross-check it against the
    /// spectral form `||Lambda (alpha_phi - alpha_rho)||_2`.
    pub fn pde_residual(&self, laplacian: &CsrMatrix, basis: &SpectralBasis) -> f64 {
        let lphi = laplacian.matvec(&self.phi).expect("state matches the Laplacian");
        let node = lphi.iter().zip(&self.rho).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        debug_assert!(
            {
                let spectral = self.pde_residual_spectral(basis);
                (node - spectral).abs() <= 1e-8 * (1.0 + spectral) + 1e3 * basis.max_residual()
            },
            "node-space and spectral residuals disagree"
        );
        node
    }

    pub fn pde_residual_spectral(&self, basis: &SpectralBasis) -> f64 {
        (0..basis.k)
            .map(|i| (basis.eigenvalues[i] * (self.alpha_phi_acc[i] - self.alpha_rho_acc[i])).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `|sum_i rho_i|`.
    pub fn net_charge(&self) -> f64 {
        self.rho.iter().sum::<f64>().abs()
    }

    /// `rho^T phi / 2`.
    pub fn electrostatic_energy(&self) -> f64 {
        0.5 * self.rho.iter().zip(&self.phi).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `alpha_rho^T Lambda alpha_phi / 2`.
    pub fn electrostatic_energy_spectral(&self, basis: &SpectralBasis) -> f64 {
        0.5 * (0..basis.k)
            .map(|i| self.alpha_rho_acc[i] * basis.eigenvalues[i] * self.alpha_phi_acc[i])
            .sum::<f64>()
    }
}

fn per_graph(values: &[f64], graph_index: &[usize], n_graphs: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_graphs];
    for (v, &g) in values.iter().zip(graph_index) {
        out[g] += v;
    }
    out
}

/// `|sum rho|` per graph of a batch.
pub fn net_charge_penalty(rho: &[f64], graph_index: &[usize], n_graphs: usize) -> Vec<f64> {
    per_graph(rho, graph_index, n_graphs).into_iter().map(f64::abs).collect()
}

/// `rho^T phi / 2` per graph of a batch.
pub fn electrostatic_energy(phi: &[f64], rho: &[f64], graph_index: &[usize], n_graphs: usize) -> Vec<f64> {
    let prod: Vec<f64> = phi.iter().zip(rho).map(|(a, b)| 0.5 * a * b).collect();
    per_graph(&prod, graph_index, n_graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigensolver::{lobpcg, LobpcgOptions};

    fn two_atom() -> (CsrMatrix, SpectralBasis) {
        let l = CsrMatrix::from_dense(2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let b = lobpcg(&l, 2, &LobpcgOptions::default()).unwrap();
        (l, b)
    }

    #[test]
    fn two_atom_residual() {
        let (l, b) = two_atom();
        let mut s = PhiState::new(2, 2);
        s.accumulate(&b, &[0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((s.pde_residual(&l, &b) - 2.0).abs() < 1e-12);
        assert!((s.pde_residual_spectral(&b) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_atom_energy() {
        let (_, b) = two_atom();
        let mut s = PhiState::new(2, 2);
        s.accumulate(&b, &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!((s.electrostatic_energy() - 1.0).abs() < 1e-12);
        assert!((s.electrostatic_energy_spectral(&b) - 1.0).abs() < 1e-12);
        assert!(s.pde_residual_spectral(&b).abs() < 1e-12);
    }

    #[test]
    fn sign_flip_leaves_observables_unchanged() {
        let (l, b) = two_atom();
        let mut flipped = b.clone();
        flipped.flip_column(1);
        let mut s1 = PhiState::new(2, 2);
        s1.accumulate(&b, &[0.3, 0.7], &[0.2, -0.4]).unwrap();
        let mut s2 = PhiState::new(2, 2);
        s2.accumulate(&flipped, &[0.3, -0.7], &[0.2, 0.4]).unwrap();
        assert!((s1.electrostatic_energy() - s2.electrostatic_energy()).abs() < 1e-12);
        assert!((s1.pde_residual(&l, &b) - s2.pde_residual(&l, &flipped)).abs() < 1e-12);
        for (a, c) in s1.phi.iter().zip(&s2.phi) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_over_layers_is_additive() {
        let (_, b) = two_atom();
        let mut s = PhiState::new(2, 2);
        s.accumulate(&b, &[1.0, 0.5], &[0.0, 1.0]).unwrap();
        s.accumulate(&b, &[-1.0, 0.5], &[0.0, 1.0]).unwrap();
        assert_eq!(s.layers, 2);
        assert_eq!(s.alpha_phi_acc, vec![0.0, 1.0]);
        assert!((s.electrostatic_energy_spectral(&b) - 2.0).abs() < 1e-12);
        assert!((s.electrostatic_energy() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let (_, b) = two_atom();
        let mut s = PhiState::new(3, 2);
        assert!(matches!(s.accumulate(&b, &[0.0; 2], &[0.0; 2]), Err(PhiError::NodeMismatch { .. })));
        let mut s = PhiState::new(2, 2);
        assert!(matches!(s.accumulate(&b, &[0.0; 3], &[0.0; 2]), Err(PhiError::ModeMismatch { .. })));
    }

    #[test]
    fn batch_helpers() {
        let idx = [0, 0, 1];
        assert_eq!(net_charge_penalty(&[1.0, -3.0, 0.5], &idx, 2), vec![2.0, 0.5]);
        assert_eq!(electrostatic_energy(&[2.0, 1.0, 4.0], &[1.0, 1.0, 1.0], &idx, 2), vec![1.5, 2.0]);
    }
}
