//! The α-Net: two node-axis convolutions, a per-graph mean, and two linear heads.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{PhiConfig, PhiError};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

/// Weights shared by every layer's α-Net call.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaNetParams {
    /// `K x F x C`
    pub conv1: Tensor,
    /// `1 x C`
    pub conv1_bias: Tensor,
    /// `K x C x C`
    pub conv2: Tensor,
    pub conv2_bias: Tensor,
    /// `C x k`
    pub head_phi: Tensor,
    /// `1 x k`
    pub head_phi_bias: Tensor,
    pub head_rho: Tensor,
    pub head_rho_bias: Tensor,
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl AlphaNetParams {
    /// Random weights with variance `1 / fan_in` and zero biases.
    /// `head_scale` multiplies both heads, so small values start the plugin near a no-op.
    pub fn init<R: Rng>(rng: &mut R, features: usize, cfg: &PhiConfig, head_scale: f64) -> Self {
        let (ks, c, k) = (cfg.kernel_size, cfg.hidden(features), cfg.k);
        let mut head_phi = normal_tensor(rng, &[c, k], c);
        let mut head_rho = normal_tensor(rng, &[c, k], c);
        head_phi.data_mut().iter_mut().for_each(|v| *v *= head_scale);
        head_rho.data_mut().iter_mut().for_each(|v| *v *= head_scale);
        Self {
            conv1: normal_tensor(rng, &[ks, features, c], ks * features),
            conv1_bias: Tensor::zeros(&[1, c]),
            conv2: normal_tensor(rng, &[ks, c, c], ks * c),
            conv2_bias: Tensor::zeros(&[1, c]),
            head_phi,
            head_phi_bias: Tensor::zeros(&[1, k]),
            head_rho,
            head_rho_bias: Tensor::zeros(&[1, k]),
        }
    }

    /// All-zero weights: the α-Net then outputs zero coefficients.
    pub fn zeros(features: usize, cfg: &PhiConfig) -> Self {
        let (ks, c, k) = (cfg.kernel_size, cfg.hidden(features), cfg.k);
        Self {
            conv1: Tensor::zeros(&[ks, features, c]),
            conv1_bias: Tensor::zeros(&[1, c]),
            conv2: Tensor::zeros(&[ks, c, c]),
            conv2_bias: Tensor::zeros(&[1, c]),
            head_phi: Tensor::zeros(&[c, k]),
            head_phi_bias: Tensor::zeros(&[1, k]),
            head_rho: Tensor::zeros(&[c, k]),
            head_rho_bias: Tensor::zeros(&[1, k]),
        }
    }

    pub fn k(&self) -> usize {
        self.head_phi.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1,
            &self.conv1_bias,
            &self.conv2,
            &self.conv2_bias,
            &self.head_phi,
            &self.head_phi_bias,
            &self.head_rho,
            &self.head_rho_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1,
            &mut self.conv1_bias,
            &mut self.conv2,
            &mut self.conv2_bias,
            &mut self.head_phi,
            &mut self.head_phi_bias,
            &mut self.head_rho,
            &mut self.head_rho_bias,
        ]
    }

    pub fn register(&self, tape: &Tape, trainable: bool) -> Result<AlphaVars, TensorError> {
        let add = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        Ok(AlphaVars {
            conv1: add(&self.conv1)?,
            conv1_bias: add(&self.conv1_bias)?,
            conv2: add(&self.conv2)?,
            conv2_bias: add(&self.conv2_bias)?,
            head_phi: add(&self.head_phi)?,
            head_phi_bias: add(&self.head_phi_bias)?,
            head_rho: add(&self.head_rho)?,
            head_rho_bias: add(&self.head_rho_bias)?,
        })
    }
}

/// Tape handles of [`AlphaNetParams`], in the same order as `tensors()`.
#[derive(Clone, Copy, Debug)]
pub struct AlphaVars {
    pub conv1: Var,
    pub conv1_bias: Var,
    pub conv2: Var,
    pub conv2_bias: Var,
    pub head_phi: Var,
    pub head_phi_bias: Var,
    pub head_rho: Var,
    pub head_rho_bias: Var,
}

impl AlphaVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.conv1,
            self.conv1_bias,
            self.conv2,
            self.conv2_bias,
            self.head_phi,
            self.head_phi_bias,
            self.head_rho,
            self.head_rho_bias,
        ]
    }
}

/// `(alpha_phi, alpha_rho)`, each `G x k`, from node features `h: n x F`.
pub fn alpha_net_forward(
    tape: &Tape,
    vars: &AlphaVars,
    h: Var,
    segments: Rc<[Range<usize>]>,
    graph_index: Rc<[usize]>,
    n_graphs: usize,
) -> Result<(Var, Var), TensorError> {
    let x = tape.conv1d_nodes(h, vars.conv1, segments.clone())?;
    let x = tape.activation(tape.add_bias(x, vars.conv1_bias)?, Activation::Silu)?;
    let x = tape.conv1d_nodes(x, vars.conv2, segments)?;
    let x = tape.activation(tape.add_bias(x, vars.conv2_bias)?, Activation::Silu)?;
    let pooled = tape.segment_mean(x, graph_index, n_graphs)?;
    let a_phi = tape.add_bias(tape.matmul(pooled, vars.head_phi)?, vars.head_phi_bias)?;
    let a_rho = tape.add_bias(tape.matmul(pooled, vars.head_rho)?, vars.head_rho_bias)?;
    Ok((a_phi, a_rho))
}

/// Value-level evaluation of a single graph's coefficients.
pub fn alpha_net_eval(params: &AlphaNetParams, h: &Tensor) -> Result<(Vec<f64>, Vec<f64>), PhiError> {
    let tape = Tape::new();
    let vars = params.register(&tape, false)?;
    let hv = tape.constant(h.clone())?;
    let n = h.rows();
    let (a, b) = alpha_net_forward(&tape, &vars, hv, Rc::from(vec![0..n]), Rc::from(vec![0; n]), 1)?;
    let out = (tape.value(a).data().to_vec(), tape.value(b).data().to_vec());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Tensor {
        Tensor::matrix(n, f, (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_coefficients() {
        let cfg = PhiConfig { k: 4, ..Default::default() };
        let p = AlphaNetParams::zeros(8, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = alpha_net_eval(&p, &features(&mut rng, 5, 8)).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn unit_kernel_is_permutation_invariant() {
        let cfg = PhiConfig { k: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AlphaNetParams::init(&mut rng, 6, &cfg, 1.0);
        let h = features(&mut rng, 7, 6);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut permuted = vec![0.0; 42];
        for (new, &old) in perm.iter().enumerate() {
            permuted[new * 6..(new + 1) * 6].copy_from_slice(&h.data()[old * 6..(old + 1) * 6]);
        }
        let hp = Tensor::matrix(7, 6, permuted).unwrap();
        let (a1, b1) = alpha_net_eval(&p, &h).unwrap();
        let (a2, b2) = alpha_net_eval(&p, &hp).unwrap();
        for (x, y) in a1.iter().chain(&b1).zip(a2.iter().chain(&b2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matches_individual_graphs() {
        let cfg = PhiConfig { k: 2, kernel_size: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AlphaNetParams::init(&mut rng, 4, &cfg, 1.0);
        let h1 = features(&mut rng, 3, 4);
        let h2 = features(&mut rng, 5, 4);
        let mut stacked = h1.data().to_vec();
        stacked.extend_from_slice(h2.data());
        let tape = Tape::new();
        let vars = p.register(&tape, true).unwrap();
        let hv = tape.constant(Tensor::matrix(8, 4, stacked).unwrap()).unwrap();
        let idx: Vec<usize> = [0; 3].into_iter().chain([1; 5]).collect();
        let (a, _) = alpha_net_forward(&tape, &vars, hv, Rc::from(vec![0..3, 3..8]), Rc::from(idx), 2).unwrap();
        let batched = tape.value(a).data().to_vec();
        let (a1, _) = alpha_net_eval(&p, &h1).unwrap();
        let (a2, _) = alpha_net_eval(&p, &h2).unwrap();
        for (x, y) in batched.iter().zip(a1.iter().chain(&a2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
