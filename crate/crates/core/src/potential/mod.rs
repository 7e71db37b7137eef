//! Continuous-filter message-passing potential with an optional Φ plugin.
//!
//! Atoms are embedded by element, refined by `layers` interaction steps
//! `h_i += update(sum_j (h_j W_in) * filter(d_ij))`, and read out as a sum of
//! per-atom energies. With the plugin enabled the α-Net runs after every
//! interaction step and the electrostatic energy is added to the readout.

mod batch;
mod forces;
mod params;

pub use batch::{BatchInputs, EdgeGeometry, LaplacianSource, PreparedSystem};
pub use forces::{energy, forces, ForceMode, ForceResult};
pub use params::{HostConfig, HostVars, InteractionParams, InteractionVars, PotentialParameters};

use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::eigensolver::EigenError;
use crate::molgraph::{LaplacianError, SystemError};
use crate::phi::{
    accumulate_on_tape, alpha_net_forward, phi_terms, spectral_electrostatic, AlphaNetParams, AlphaVars, PhiConfig,
    PhiError, PhiTapeState, PhiTerms,
};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("atomic number {z} outside the embedding table (1..={max})")]
    ZOutOfRange { z: u32, max: usize },
    #[error("invalid host configuration: {0}")]
    Config(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Phi(#[from] PhiError),
}

/// α-Net weights together with the plugin hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiPlugin {
    pub config: PhiConfig,
    pub params: AlphaNetParams,
}

/// Host parameters plus the optional Φ plugin.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub host: PotentialParameters,
    pub phi: Option<PhiPlugin>,
}

impl Model {
    pub fn bare<R: Rng>(rng: &mut R, cfg: &HostConfig) -> Result<Self, PotentialError> {
        Ok(Self { host: PotentialParameters::init(rng, cfg)?, phi: None })
    }

    pub fn with_phi<R: Rng>(
        rng: &mut R,
        cfg: &HostConfig,
        phi: PhiConfig,
        head_scale: f64,
    ) -> Result<Self, PotentialError> {
        phi.validate()?;
        let host = PotentialParameters::init(rng, cfg)?;
        let params = AlphaNetParams::init(rng, cfg.features, &phi, head_scale);
        Ok(Self { host, phi: Some(PhiPlugin { config: phi, params }) })
    }

    pub fn config(&self) -> &HostConfig {
        &self.host.config
    }

    /// Trainable tensors: host first, then the α-Net.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.host.tensors();
        if let Some(p) = &self.phi {
            out.extend(p.params.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.host.tensors_mut();
        if let Some(p) = &mut self.phi {
            out.extend(p.params.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, tape: &Tape, trainable: bool) -> Result<ModelVars, TensorError> {
        let host = self.host.register(tape, trainable)?;
        let alpha = match &self.phi {
            Some(p) => Some(p.params.register(tape, trainable)?),
            None => None,
        };
        Ok(ModelVars { host, alpha })
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub host: HostVars,
    pub alpha: Option<AlphaVars>,
}

impl ModelVars {
    /// Same order as [`Model::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.host.all();
        if let Some(a) = &self.alpha {
            out.extend(a.all());
        }
        out
    }
}

/// Φ quantities of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PhiOutputs {
    pub state: PhiTapeState,
    pub terms: PhiTerms,
}

/// Per-graph outputs, each `G x 1`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `E_model + E_ES`.
    pub energy: Var,
    pub host_energy: Var,
    /// The electrostatic term that entered `energy`.
    pub electrostatic: Option<Var>,
    pub phi: Option<PhiOutputs>,
}

/// Row lookup of the element embedding.
pub fn embed(tape: &Tape, vars: &HostVars, inputs: &BatchInputs) -> Result<Var, TensorError> {
    tape.gather_rows(vars.embedding, inputs.z_index.clone())
}

/// Edge features `E x n_rbf`.
pub fn edge_features(tape: &Tape, host: &PotentialParameters, inputs: &BatchInputs) -> Result<Var, TensorError> {
    match &inputs.geometry {
        EdgeGeometry::Cached(rbf) => tape.constant(rbf.clone()),
        EdgeGeometry::Positions(pos) => {
            let a = tape.gather_rows(*pos, inputs.src.clone())?;
            let b = tape.gather_rows(*pos, inputs.dst.clone())?;
            let d = tape.row_norm(tape.sub(a, b)?)?;
            tape.rbf_expand(d, Rc::new(host.rbf.clone()))
        }
    }
}

/// One continuous-filter convolution with a residual update.
pub fn interaction_step(
    tape: &Tape,
    layer: &InteractionVars,
    h: Var,
    rbf: Var,
    inputs: &BatchInputs,
) -> Result<Var, TensorError> {
    let filter = tape.activation(tape.matmul(rbf, layer.filter1)?, Activation::ShiftedSoftplus)?;
    let filter = tape.matmul(filter, layer.filter2)?;
    let x = tape.matmul(h, layer.input)?;
    let xj = tape.gather_rows(x, inputs.dst.clone())?;
    let m = tape.scatter_add_rows(tape.mul(xj, filter)?, inputs.src.clone(), inputs.n_nodes)?;
    let v = tape.activation(tape.add_bias(tape.matmul(m, layer.update1)?, layer.update1_bias)?, Activation::ShiftedSoftplus)?;
    let v = tape.add_bias(tape.matmul(v, layer.update2)?, layer.update2_bias)?;
    tape.add(h, v)
}

/// Per-graph sum of the per-atom energy head.
pub fn readout_energy(
    tape: &Tape,
    host: &PotentialParameters,
    vars: &HostVars,
    h: Var,
    inputs: &BatchInputs,
) -> Result<Var, TensorError> {
    let x = tape.activation(tape.add_bias(tape.matmul(h, vars.readout1)?, vars.readout1_bias)?, Activation::ShiftedSoftplus)?;
    let atom = tape.add_bias(tape.matmul(x, vars.readout2)?, vars.readout2_bias)?;
    let atom = tape.scale(atom, host.energy_scale)?;
    let shift = tape.constant(Tensor::column(vec![host.energy_shift; inputs.n_nodes]))?;
    let atom = tape.add(atom, shift)?;
    tape.scatter_add_rows(atom, inputs.graph_index.clone(), inputs.n_graphs)
}

/// Message passing with the Φ plugin interleaved after every layer.
///
/// With `spectral_lambda` (`G x k`) the electrostatic term is evaluated as
/// `sum_i lambda_i alpha_rho_i alpha_phi_i / 2`, which is how position
/// derivatives reach the eigenvalues; otherwise it is `rho^T phi / 2`.
pub fn forward(
    tape: &Tape,
    model: &Model,
    vars: &ModelVars,
    inputs: &BatchInputs,
    spectral_lambda: Option<Var>,
) -> Result<ForwardOutput, PotentialError> {
    let rbf = edge_features(tape, &model.host, inputs)?;
    let mut h = embed(tape, &vars.host, inputs)?;
    let mut state: Option<PhiTapeState> = None;
    let phi_setup = match (&model.phi, &vars.alpha, &inputs.spectral) {
        (Some(_), Some(a), Some(ctx)) => Some((a, ctx)),
        (None, _, _) => None,
        _ => return Err(PotentialError::Config("Φ plugin enabled but batch has no spectral data".into())),
    };
    for layer in &vars.host.layers {
        h = interaction_step(tape, layer, h, rbf, inputs)?;
        if let Some((alpha, ctx)) = phi_setup {
            let (a_phi, a_rho) = alpha_net_forward(
                tape,
                alpha,
                h,
                inputs.segments.clone(),
                inputs.graph_index.clone(),
                inputs.n_graphs,
            )?;
            state = Some(accumulate_on_tape(tape, ctx, state, a_phi, a_rho)?);
        }
    }
    let host_energy = readout_energy(tape, &model.host, &vars.host, h, inputs)?;
    let Some(((_, ctx), state)) = phi_setup.zip(state) else {
        return Ok(ForwardOutput { energy: host_energy, host_energy, electrostatic: None, phi: None });
    };
    let terms = phi_terms(tape, ctx, &state, inputs.graph_index.clone(), inputs.n_graphs)?;
    let es = match spectral_lambda {
        Some(lambda) => spectral_electrostatic(tape, lambda, &state)?,
        None => terms.electrostatic,
    };
    let energy = tape.add(host_energy, es)?;
    Ok(ForwardOutput {
        energy,
        host_energy,
        electrostatic: Some(es),
        phi: Some(PhiOutputs { state, terms }),
    })
}

#[cfg(test)]
mod tests;
