//! Energies and forces of single systems.
//!
//! In autodiff mode positions are a tape input. Host features depend on them
//! through edge distances; the electrostatic term is evaluated spectrally with
//! each eigenvalue written as the Rayleigh quotient `u_i^T L(x) u_i` for frozen
//! `u_i`, whose derivative is the Hellmann-Feynman expression for a simple
//! eigenvalue. The eigenvectors themselves are not differentiated: every Φ
//! quantity depends on the basis only through the eigenvalues.

use std::rc::Rc;

use log::warn;

use super::batch::{plugin_laplacian, solver_options, z_indices};
use super::{forward, BatchInputs, EdgeGeometry, LaplacianSource, Model, PotentialError, PreparedSystem};
use crate::eigensolver::{lobpcg, SpectralBasis};
use crate::molgraph::{build_radius_graph, AtomicSystem};
use crate::phi::SpectralContext;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Finite-difference step in Å.
pub const FD_STEP: f64 = 1e-4;
/// Eigenvalues closer than this are treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForceMode {
    Autodiff,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForceResult {
    pub energy: f64,
    pub forces: Vec<[f64; 3]>,
    /// The mode that produced `forces`; differs from the request after a fallback.
    pub mode: ForceMode,
}

/// Predicted energy of one system.
pub fn energy(sys: &AtomicSystem, model: &Model) -> Result<f64, PotentialError> {
    let prepared = PreparedSystem::new(sys, model, LaplacianSource::Physical)?;
    let k = model.phi.as_ref().map(|p| p.config.k);
    let inputs = BatchInputs::from_prepared(&[&prepared], k)?;
    let tape = Tape::new();
    let vars = model.register(&tape, false)?;
    let out = forward(&tape, model, &vars, &inputs, None)?;
    let e = tape.item(out.energy);
    Ok(e)
}

pub fn forces(sys: &AtomicSystem, model: &Model, mode: ForceMode) -> Result<ForceResult, PotentialError> {
    match mode {
        ForceMode::FiniteDifference => finite_difference(sys, model),
        ForceMode::Autodiff => match autodiff(sys, model)? {
            Some(r) => Ok(r),
            None => {
                warn!("degenerate Laplacian spectrum; using finite-difference forces");
                finite_difference(sys, model)
            }
        },
    }
}

fn finite_difference(sys: &AtomicSystem, model: &Model) -> Result<ForceResult, PotentialError> {
    let e0 = energy(sys, model)?;
    let mut forces = vec![[0.0; 3]; sys.len()];
    let mut moved = sys.clone();
    for a in 0..sys.len() {
        for c in 0..3 {
            let x = sys.positions[a][c];
            moved.positions[a][c] = x + FD_STEP;
            let plus = energy(&moved, model)?;
            moved.positions[a][c] = x - FD_STEP;
            let minus = energy(&moved, model)?;
            moved.positions[a][c] = x;
            forces[a][c] = -(plus - minus) / (2.0 * FD_STEP);
        }
    }
    Ok(ForceResult { energy: e0, forces, mode: ForceMode::FiniteDifference })
}

/// True when a nonzero eigenvalue among the first `k_eff` coincides with a neighbor.
fn has_degeneracy(basis: &SpectralBasis, k_eff: usize) -> bool {
    basis
        .clusters(DEGENERACY_TOL)
        .iter()
        .any(|c| c.len() > 1 && c[0] < k_eff && basis.eigenvalues[c[0]].abs() > DEGENERACY_TOL)
}

fn truncated(basis: &SpectralBasis, k: usize) -> SpectralBasis {
    let mut vectors = Vec::with_capacity(basis.n * k);
    for r in 0..basis.n {
        vectors.extend_from_slice(&basis.vectors[r * basis.k..r * basis.k + k]);
    }
    SpectralBasis {
        graph_id: basis.graph_id,
        n: basis.n,
        k,
        eigenvalues: basis.eigenvalues[..k].to_vec(),
        vectors,
        residual_norms: basis.residual_norms[..k].to_vec(),
    }
}

/// `lambda_i(x) = u_i^T L(x) u_i` as a `1 x k` row, zero-padded beyond `basis.k`.
fn rayleigh_eigenvalues(
    tape: &Tape,
    pos: Var,
    src: &[usize],
    dst: &[usize],
    basis: &SpectralBasis,
    k: usize,
) -> Result<Var, TensorError> {
    let n = basis.n;
    let ke = basis.k;
    let mut degree = vec![0usize; n];
    for &i in src {
        degree[i] += 1;
    }
    let mut diag = vec![0.0; ke];
    for v in (0..n).filter(|&v| degree[v] > 0) {
        for (i, d) in diag.iter_mut().enumerate() {
            *d += basis.at(v, i).powi(2);
        }
    }
    let mut lambda = tape.constant(Tensor::row(diag))?;
    if !src.is_empty() {
        let src_rc: Rc<[usize]> = src.into();
        let dst_rc: Rc<[usize]> = dst.into();
        let a = tape.gather_rows(pos, src_rc.clone())?;
        let b = tape.gather_rows(pos, dst_rc.clone())?;
        let w = tape.row_norm(tape.sub(a, b)?)?;
        let deg = tape.scatter_add_rows(w, src_rc.clone(), n)?;
        // Isolated nodes get a unit degree; they have no edges, so it never enters a weight.
        let iso = tape.constant(Tensor::column(degree.iter().map(|&d| if d == 0 { 1.0 } else { 0.0 }).collect()))?;
        let inv_sqrt = tape.powf(tape.add(deg, iso)?, -0.5)?;
        let coef = tape.mul(
            w,
            tape.mul(tape.gather_rows(inv_sqrt, src_rc)?, tape.gather_rows(inv_sqrt, dst_rc)?)?,
        )?;
        let pairs: Vec<f64> = src
            .iter()
            .zip(dst)
            .flat_map(|(&i, &j)| (0..ke).map(move |c| (i, j, c)))
            .map(|(i, j, c)| basis.at(i, c) * basis.at(j, c))
            .collect();
        let pairs = tape.constant(Tensor::matrix(src.len(), ke, pairs)?)?;
        let off = tape.matmul(tape.transpose(coef)?, pairs)?;
        lambda = tape.sub(lambda, off)?;
    }
    if ke == k {
        return Ok(lambda);
    }
    let mut select = vec![0.0; ke * k];
    for i in 0..ke {
        select[i * k + i] = 1.0;
    }
    tape.matmul(lambda, tape.constant(Tensor::matrix(ke, k, select)?)?)
}

fn autodiff(sys: &AtomicSystem, model: &Model) -> Result<Option<ForceResult>, PotentialError> {
    sys.validate()?;
    let cfg = model.config();
    let n = sys.len();
    let z_index = z_indices(sys, cfg.z_max)?;
    let graph = build_radius_graph(sys, cfg.cutoff, cfg.max_neighbors);
    let (src, dst) = graph.endpoints();

    let tape = Tape::new();
    let vars = model.register(&tape, false)?;
    let flat: Vec<f64> = sys.positions.iter().flatten().copied().collect();
    let pos = tape.param(Tensor::matrix(n, 3, flat)?)?;

    let mut spectral = None;
    let mut lambda = None;
    if let (Some(plugin), Some(l)) = (&model.phi, plugin_laplacian(sys, model, LaplacianSource::Physical)?) {
        let k = plugin.config.k;
        let k_eff = k.min(n);
        let wide = lobpcg(&l, (k + 1).min(n), &solver_options(model, 0))?;
        if has_degeneracy(&wide, k_eff) {
            return Ok(None);
        }
        let basis = truncated(&wide, k_eff);
        let lap_cutoff = plugin.config.laplacian_cutoff.unwrap_or(cfg.cutoff);
        let (ls, ld) = build_radius_graph(sys, lap_cutoff, cfg.max_neighbors).endpoints();
        lambda = Some(rayleigh_eigenvalues(&tape, pos, &ls, &ld, &basis, k)?);
        spectral = Some(SpectralContext::new(std::slice::from_ref(&basis), &[&l], &[0..n], k));
    }

    let inputs = BatchInputs {
        n_nodes: n,
        n_graphs: 1,
        z_index: z_index.into(),
        src: src.into(),
        dst: dst.into(),
        graph_index: vec![0; n].into(),
        segments: vec![0..n].into(),
        geometry: EdgeGeometry::Positions(pos),
        spectral,
    };
    let out = forward(&tape, model, &vars, &inputs, lambda)?;
    let total = tape.sum(out.energy)?;
    let e = tape.item(total);
    let grads = tape.backward(total)?;
    let g = grads.get_or_zeros(pos);
    let forces = (0..n).map(|a| [-g.at(a, 0), -g.at(a, 1), -g.at(a, 2)]).collect();
    Ok(Some(ForceResult { energy: e, forces, mode: ForceMode::Autodiff }))
}
