//! Host configuration and parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PotentialError;
use crate::molgraph::DEFAULT_MAX_NEIGHBORS;
use crate::tensor::{RadialBasis, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HostConfig {
    pub features: usize,
    pub layers: usize,
    pub n_rbf: usize,
    /// Å
    pub cutoff: f64,
    pub max_neighbors: usize,
    /// Largest atomic number the embedding table covers.
    pub z_max: usize,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self { features: 64, layers: 3, n_rbf: 32, cutoff: 6.0, max_neighbors: DEFAULT_MAX_NEIGHBORS, z_max: 86 }
    }
}

impl HostConfig {
    pub fn validate(&self) -> Result<(), PotentialError> {
        let bad = |m: &str| Err(PotentialError::Config(m.to_string()));
        if self.features == 0 || self.n_rbf == 0 || self.z_max == 0 {
            return bad("features, n_rbf and z_max must be positive");
        }
        if self.layers == 0 {
            return bad("at least one interaction layer is required");
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return bad("cutoff must be positive and finite");
        }
        if self.max_neighbors == 0 {
            return bad("max_neighbors must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionParams {
    /// `n_rbf x F`
    pub filter1: Tensor,
    /// `F x F`
    pub filter2: Tensor,
    /// `F x F`
    pub input: Tensor,
    pub update1: Tensor,
    pub update1_bias: Tensor,
    pub update2: Tensor,
    pub update2_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct InteractionVars {
    pub filter1: Var,
    pub filter2: Var,
    pub input: Var,
    pub update1: Var,
    pub update1_bias: Var,
    pub update2: Var,
    pub update2_bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialParameters {
    pub config: HostConfig,
    pub rbf: RadialBasis,
    /// `z_max x F`; row `Z - 1` belongs to element `Z`.
    pub embedding: Tensor,
    pub layers: Vec<InteractionParams>,
    /// `F x F/2`
    pub readout1: Tensor,
    pub readout1_bias: Tensor,
    /// `F/2 x 1`
    pub readout2: Tensor,
    pub readout2_bias: Tensor,
    /// Fixed per-atom energy scale, set from training statistics.
    pub energy_scale: f64,
    /// Fixed per-atom energy offset.
    pub energy_shift: f64,
}

#[derive(Clone, Debug)]
pub struct HostVars {
    pub embedding: Var,
    pub layers: Vec<InteractionVars>,
    pub readout1: Var,
    pub readout1_bias: Var,
    pub readout2: Var,
    pub readout2_bias: Var,
}

impl HostVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([l.filter1, l.filter2, l.input, l.update1, l.update1_bias, l.update2, l.update2_bias]);
        }
        out.extend([self.readout1, self.readout1_bias, self.readout2, self.readout2_bias]);
        out
    }
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl PotentialParameters {
    pub fn init<R: Rng>(rng: &mut R, cfg: &HostConfig) -> Result<Self, PotentialError> {
        cfg.validate()?;
        let f = cfg.features;
        let half = (f / 2).max(1);
        let s = 1.0 / (f as f64).sqrt();
        let embedding = normal(rng, cfg.z_max, f, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| InteractionParams {
                filter1: normal(rng, cfg.n_rbf, f, 1.0 / (cfg.n_rbf as f64).sqrt()),
                filter2: normal(rng, f, f, s),
                input: normal(rng, f, f, s),
                update1: normal(rng, f, f, s),
                update1_bias: Tensor::zeros(&[1, f]),
                update2: normal(rng, f, f, s),
                update2_bias: Tensor::zeros(&[1, f]),
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            rbf: RadialBasis::evenly_spaced(cfg.n_rbf, cfg.cutoff),
            embedding,
            layers,
            readout1: normal(rng, f, half, s),
            readout1_bias: Tensor::zeros(&[1, half]),
            readout2: normal(rng, half, 1, 1.0 / (half as f64).sqrt()),
            readout2_bias: Tensor::zeros(&[1, 1]),
            energy_scale: 1.0,
            energy_shift: 0.0,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend([&l.filter1, &l.filter2, &l.input, &l.update1, &l.update1_bias, &l.update2, &l.update2_bias]);
        }
        out.extend([&self.readout1, &self.readout1_bias, &self.readout2, &self.readout2_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.filter1,
                &mut l.filter2,
                &mut l.input,
                &mut l.update1,
                &mut l.update1_bias,
                &mut l.update2,
                &mut l.update2_bias,
            ]);
        }
        out.extend([&mut self.readout1, &mut self.readout1_bias, &mut self.readout2, &mut self.readout2_bias]);
        out
    }

    pub fn register(&self, tape: &Tape, trainable: bool) -> Result<HostVars, TensorError> {
        let add = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let mut layers = Vec::with_capacity(self.layers.len());
        let embedding = add(&self.embedding)?;
        for l in &self.layers {
            layers.push(InteractionVars {
                filter1: add(&l.filter1)?,
                filter2: add(&l.filter2)?,
                input: add(&l.input)?,
                update1: add(&l.update1)?,
                update1_bias: add(&l.update1_bias)?,
                update2: add(&l.update2)?,
                update2_bias: add(&l.update2_bias)?,
            });
        }
        Ok(HostVars {
            embedding,
            layers,
            readout1: add(&self.readout1)?,
            readout1_bias: add(&self.readout1_bias)?,
            readout2: add(&self.readout2)?,
            readout2_bias: add(&self.readout2_bias)?,
        })
    }
}
