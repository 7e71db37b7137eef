//! Per-system preprocessing and batch assembly.

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, PotentialError};
use crate::eigensolver::{lobpcg, LobpcgOptions, SpectralBasis};
use crate::molgraph::{build_radius_graph, build_weighted_laplacian, random_symmetric_psd, AtomicSystem};
use crate::phi::SpectralContext;
use crate::sparse::CsrMatrix;
use crate::tensor::{Tensor, Var};

/// Which operator supplies the spectral basis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LaplacianSource {
    /// Distance-weighted normalized Laplacian of the radius graph.
    #[default]
    Physical,
    /// A random symmetric PSD matrix with spectrum in `[0, 2]`, seeded per system.
    Random { seed: u64 },
}

/// Geometry-dependent inputs of one system, computed once and reused across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSystem {
    pub n: usize,
    pub z_index: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `E x n_rbf` edge features.
    pub rbf: Tensor,
    pub laplacian: Option<CsrMatrix>,
    pub basis: Option<SpectralBasis>,
    pub energy: Option<f64>,
}

pub(crate) fn z_indices(sys: &AtomicSystem, z_max: usize) -> Result<Vec<usize>, PotentialError> {
    sys.atomic_numbers
        .iter()
        .map(|&z| {
            if z == 0 || z as usize > z_max {
                Err(PotentialError::ZOutOfRange { z, max: z_max })
            } else {
                Ok(z as usize - 1)
            }
        })
        .collect()
}

/// Laplacian of `sys` for the plugin, or `None` for a bare host.
pub(crate) fn plugin_laplacian(
    sys: &AtomicSystem,
    model: &Model,
    source: LaplacianSource,
) -> Result<Option<CsrMatrix>, PotentialError> {
    let Some(plugin) = &model.phi else { return Ok(None) };
    Ok(Some(match source {
        LaplacianSource::Physical => {
            let cfg = model.config();
            let cutoff = plugin.config.laplacian_cutoff.unwrap_or(cfg.cutoff);
            build_weighted_laplacian(&build_radius_graph(sys, cutoff, cfg.max_neighbors))?
        }
        LaplacianSource::Random { seed } => random_symmetric_psd(sys.len(), &mut ChaCha8Rng::seed_from_u64(seed)),
    }))
}

pub(crate) fn solver_options(model: &Model, seed: u64) -> LobpcgOptions {
    let which = model.phi.as_ref().map(|p| p.config.which).unwrap_or_default();
    LobpcgOptions { which, seed, ..Default::default() }
}

impl PreparedSystem {
    pub fn new(sys: &AtomicSystem, model: &Model, source: LaplacianSource) -> Result<Self, PotentialError> {
        sys.validate()?;
        let cfg = model.config();
        let z_index = z_indices(sys, cfg.z_max)?;
        let graph = build_radius_graph(sys, cfg.cutoff, cfg.max_neighbors);
        let (src, dst) = graph.endpoints();
        let n_rbf = model.host.rbf.len();
        let mut rbf = Vec::with_capacity(graph.n_edges() * n_rbf);
        for &d in &graph.distances {
            rbf.extend(model.host.rbf.expand(d));
        }
        let rbf = Tensor::matrix(graph.n_edges(), n_rbf, rbf)?;
        let laplacian = plugin_laplacian(sys, model, source)?;
        let basis = match (&laplacian, &model.phi) {
            (Some(l), Some(p)) => Some(lobpcg(l, p.config.k.min(sys.len()), &solver_options(model, 0))?),
            _ => None,
        };
        Ok(Self { n: sys.len(), z_index, src, dst, rbf, laplacian, basis, energy: sys.energy })
    }
}

/// Where edge features come from.
#[derive(Clone, Debug)]
pub enum EdgeGeometry {
    /// Precomputed `E x n_rbf` features.
    Cached(Tensor),
    /// Atom positions `n x 3` on the tape; features are recomputed from them.
    Positions(Var),
}

/// Everything the forward pass needs for a batch of graphs.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub n_nodes: usize,
    pub n_graphs: usize,
    pub z_index: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub graph_index: Rc<[usize]>,
    pub segments: Rc<[Range<usize>]>,
    pub geometry: EdgeGeometry,
    pub spectral: Option<SpectralContext>,
}

impl BatchInputs {
    /// Concatenates prepared systems. Spectral data is included when every system has it.
    pub fn from_prepared(items: &[&PreparedSystem], k: Option<usize>) -> Result<Self, PotentialError> {
        let mut z_index = Vec::new();
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        let mut graph_index = Vec::new();
        let mut segments = Vec::with_capacity(items.len());
        let n_rbf = items.first().map_or(0, |p| p.rbf.cols());
        let mut rbf = Vec::new();
        let mut offset = 0;
        for (g, p) in items.iter().enumerate() {
            z_index.extend_from_slice(&p.z_index);
            src.extend(p.src.iter().map(|i| i + offset));
            dst.extend(p.dst.iter().map(|j| j + offset));
            graph_index.extend(std::iter::repeat(g).take(p.n));
            rbf.extend_from_slice(p.rbf.data());
            segments.push(offset..offset + p.n);
            offset += p.n;
        }
        let spectral = match k {
            Some(k) if items.iter().all(|p| p.basis.is_some() && p.laplacian.is_some()) => {
                let bases: Vec<SpectralBasis> = items.iter().map(|p| p.basis.clone().expect("checked")).collect();
                let ls: Vec<&CsrMatrix> = items.iter().map(|p| p.laplacian.as_ref().expect("checked")).collect();
                Some(SpectralContext::new(&bases, &ls, &segments, k))
            }
            _ => None,
        };
        let n_edges = src.len();
        Ok(Self {
            n_nodes: offset,
            n_graphs: items.len(),
            z_index: z_index.into(),
            src: src.into(),
            dst: dst.into(),
            graph_index: graph_index.into(),
            segments: segments.into(),
            geometry: EdgeGeometry::Cached(Tensor::matrix(n_edges, n_rbf, rbf)?),
            spectral,
        })
    }
}
